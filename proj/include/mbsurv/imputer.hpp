#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mbsurv/data_model.hpp"
#include "mbsurv/rng.hpp"

namespace mbsurv {

/// Number of hidden states used by default for the clinical imputation model.
inline constexpr int kDefaultLatentStates = 90;

/// p(x_k | h) for one feature, stored row-major as [state h][category c].
struct EmissionTable {
  int states = 0;
  int categories = 0;
  std::vector<double> probs;

  double operator()(int h, int c) const {
    return probs[static_cast<std::size_t>(h) * categories + c];
  }
  std::span<const double> row(int h) const {
    return {probs.data() + static_cast<std::size_t>(h) * categories,
            static_cast<std::size_t>(categories)};
  }
};

/// Mixture of independent categoricals: p(x) = sum_h p(h) prod_k p(x_k | h).
class LatentClassModel {
 public:
  LatentClassModel() = default;
  /// Throws ValidationError unless every distribution is strictly positive and
  /// sums to 1 within 1e-12.
  LatentClassModel(std::vector<double> prior, std::vector<EmissionTable> emissions,
                   std::string schema_fingerprint);

  int latent_states() const { return static_cast<int>(prior_.size()); }
  std::size_t feature_count() const { return emissions_.size(); }
  const std::vector<double>& prior() const { return prior_; }
  const EmissionTable& emission(std::size_t k) const { return emissions_[k]; }
  const std::vector<EmissionTable>& emissions() const { return emissions_; }
  const std::string& schema_fingerprint() const { return fingerprint_; }

  /// Refuses a schema whose fingerprint differs from the one the model was fit on.
  void check_schema(const FeatureSchema& schema) const;

  json to_json() const;
  static LatentClassModel from_json(const json& j);

 private:
  std::vector<double> prior_;
  std::vector<EmissionTable> emissions_;
  std::string fingerprint_;
};

/// q(h | x_o^n) per record, row-major [record][state], plus the observed-data
/// log-likelihood evaluated under the same parameters.
struct Responsibilities {
  int states = 0;
  std::vector<double> q;
  double log_likelihood = 0.0;

  std::size_t records() const { return states == 0 ? 0 : q.size() / states; }
  std::span<const double> row(std::size_t n) const {
    return {q.data() + n * static_cast<std::size_t>(states), static_cast<std::size_t>(states)};
  }
};

/// sum_n log sum_h p(h) prod_{i observed} p(x_i | h), in the log domain.
double log_likelihood(const LatentClassModel& model, const Cohort& cohort);

Responsibilities e_step(const LatentClassModel& model, const Cohort& cohort);

/// One EM update. Observed entries add q(h|x) to their category; a missing
/// entry adds q(h|x) p_old(c|h) to every category c. `smoothing` is an additive
/// pseudocount applied to every normalization (emissions and prior).
LatentClassModel m_step(const LatentClassModel& model, const Cohort& cohort,
                        const Responsibilities& responsibilities, double smoothing);

struct EmConfig {
  int max_iters = 500;
  double rel_tol = 1e-6;
  double smoothing = 1e-3;
  std::uint64_t seed = 0;
};

struct EmFit {
  LatentClassModel model;
  /// Observed-data log-likelihood of the initial model and after every M-step.
  std::vector<double> log_likelihood_trace;
  int iterations = 0;
  bool converged = false;
};

/// Initial model: uniform prior, smoothed empirical marginals with seeded
/// multiplicative noise in [0.9, 1.1] (no noise when H = 1).
LatentClassModel initial_model(const Cohort& cohort, int latent_states, const EmConfig& config);

/// EM until the relative change of the log-likelihood drops below rel_tol
/// or max_iters M-steps have run.
EmFit fit_em(const Cohort& cohort, int latent_states, const EmConfig& config = {});

/// Exact posterior over the missing entries of one record,
/// p(x_m | x_o) proportional to sum_h p(h) p(x_m | h) p(x_o | h), kept in its
/// mixture form: weights p(h | x_o) and per-state tables for each missing feature.
class MissingPosterior {
 public:
  MissingPosterior() = default;
  MissingPosterior(std::vector<double> weights, std::vector<std::size_t> features,
                   std::vector<EmissionTable> tables);

  bool empty() const { return features_.empty(); }
  const std::vector<std::size_t>& missing_features() const { return features_; }
  const std::vector<double>& weights() const { return weights_; }

  /// Marginal distribution of the j-th missing feature.
  std::vector<double> marginal(std::size_t j) const;
  /// Joint posterior probability of a completion (one category per missing feature).
  double probability(std::span<const int> completion) const;
  /// Exact joint draw: h from the weights, then each feature from p(x | h).
  std::vector<int> sample(Rng& rng) const;
  /// Best of the per-state argmax completions and the marginal-argmax
  /// completion, scored by the exact joint. Exact for one missing feature.
  std::vector<int> map_completion() const;

 private:
  std::vector<double> weights_;
  std::vector<std::size_t> features_;
  std::vector<EmissionTable> tables_;
};

MissingPosterior posterior_missing(const LatentClassModel& model, const ClinicalRecord& record);

/// Posteriors for every record of a fixed cohort, computed once. Sampling
/// draws the same values as impute_sample given the same generator state.
class CohortPosterior {
 public:
  CohortPosterior(const LatentClassModel& model, const Cohort& cohort);

  std::size_t size() const { return records_.size(); }
  ClinicalRecord sample(std::size_t n, Rng& rng) const;
  const ClinicalRecord& map(std::size_t n) const { return map_records_.at(n); }
  const std::vector<ClinicalRecord>& map_records() const { return map_records_; }

 private:
  LatentClassModel model_;
  std::vector<ClinicalRecord> records_;
  std::vector<std::vector<double>> weights_;  // empty for complete records
  std::vector<ClinicalRecord> map_records_;
};

enum class ImputeMode { sample, map, expectation };

ImputeMode parse_impute_mode(std::string_view text);

ClinicalRecord impute_sample(const LatentClassModel& model, const ClinicalRecord& record, Rng& rng);
ClinicalRecord impute_map(const LatentClassModel& model, const ClinicalRecord& record);

struct FeatureExpectation {
  std::size_t feature = 0;
  std::vector<double> distribution;  // posterior marginal over categories/bins
  int most_probable = 0;
  /// Continuous: sum over bins of marginal * representative.
  /// Categorical: index of the most probable category.
  double point_value = 0.0;
};

struct ExpectationImputation {
  ClinicalRecord record;          // missing states filled with the marginal argmax
  RawRecord values;               // feature units, missing entries filled with point values
  std::vector<FeatureExpectation> features;
};

ExpectationImputation impute_expectation(const LatentClassModel& model,
                                         const ClinicalRecord& record,
                                         const FeatureSchema& schema, const BinningSpec& binning);

/// Fills each missing feature with a training constant: the modal category for
/// categorical features, the mean of observed bin representatives for continuous ones.
class MeanImputer {
 public:
  static MeanImputer fit(const Cohort& training, const BinningSpec& binning);

  /// Constant in feature units (category index or mean value).
  double fill_value(std::size_t k) const { return fill_values_.at(k); }
  /// Constant as a state (mode, or the bin containing the mean).
  int fill_state(std::size_t k) const { return fill_states_.at(k); }

  ClinicalRecord impute(const ClinicalRecord& record) const;
  RawRecord impute_raw(const RawRecord& record) const;

 private:
  std::vector<double> fill_values_;
  std::vector<int> fill_states_;
};

}  // namespace mbsurv
