#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mbsurv/data_model.hpp"

namespace mbsurv {

/// One generated feature. Each feature has `levels` latent levels drawn from
/// per-class emission tables. A categorical feature reports the level as its
/// category; a continuous one reports offset + scale * (level + U[0,1)).
struct GeneratedFeature {
  std::string name;
  FeatureKind kind = FeatureKind::categorical;
  std::vector<std::string> categories;  // categorical: one per level
  int levels = 0;                       // continuous: number of levels
  double offset = 0.0;
  double scale = 1.0;
  int bin_count = kDefaultBinCount;     // bins used by the schema
  double missingness = 0.0;
  bool always_observed = false;
  std::vector<double> risk_weights;             // one per level
  std::vector<std::vector<double>> emissions;   // [class][level]

  int level_count() const {
    return kind == FeatureKind::categorical ? static_cast<int>(categories.size()) : levels;
  }
};

/// Latent-class features, log-linear exponential hazards, independent
/// exponential censoring and MCAR masking.
struct GeneratorSpec {
  int latent_states = 1;
  std::vector<double> prior;
  std::vector<GeneratedFeature> features;
  double baseline_rate = 0.01;   // per week, at score 0
  double censoring_rate = 0.01;  // per week
  std::size_t n = 0;
  std::uint64_t seed = 0;

  /// Throws ValidationError on unnormalized distributions, nonpositive rates,
  /// missingness outside [0,1), or a masked always-observed feature.
  void validate() const;
  FeatureSchema schema() const;
  /// True risk score w . onehot(levels).
  double score(std::span<const int> levels) const;

  json to_json() const;
  static GeneratorSpec from_json(const json& j);
};

struct GroundTruth {
  std::vector<int> classes;
  std::vector<double> true_scores;
  std::vector<double> death_times;      // before censoring
  std::vector<double> censoring_times;
  std::vector<std::vector<int>> levels; // per patient, per feature
  RawCohort complete;                   // same cohort before masking

  json to_json() const;
};

struct SyntheticCohort {
  RawCohort cohort;
  GroundTruth truth;
};

/// Deterministic given spec.seed.
SyntheticCohort generate(const GeneratorSpec& spec);

/// Harrell concordance of the true scores against the observed outcomes.
double oracle_cindex(const GroundTruth& truth, std::span<const SurvivalOutcome> outcomes);
double oracle_cindex(const SyntheticCohort& synthetic);

struct RandomSpecOptions {
  int latent_states = 3;
  int categorical_features = 6;
  int continuous_features = 0;
  int min_categories = 2;
  int max_categories = 5;
  int continuous_levels = 5;
  double missingness = 0.3;
  /// Larger values give more peaked (more class-informative) emission tables.
  double sharpness = 1.0;
  double risk_scale = 0.0;
  std::size_t n = 1000;
  double baseline_rate = 0.01;
  double censoring_rate = 0.01;
};

/// Random prior, emissions and risk weights drawn from `seed`.
GeneratorSpec random_spec(const RandomSpecOptions& options, std::uint64_t seed);

struct ClinicalSpecOptions {
  std::size_t n = 2000;
  double missingness = 0.2;
  /// Multiplies every risk weight; 1 gives an oracle C-index near 0.80.
  double risk_scale = 1.0;
  /// Target censored fraction; the censoring rate is solved for it.
  double censored_fraction = 0.4;
};

/// Six clinical-looking features (age, sex, smoking, antifibrotic, FVC %, DLCO)
/// driven by five latent classes; age and sex are always observed.
GeneratorSpec clinical_like_spec(const ClinicalSpecOptions& options, std::uint64_t seed);

/// Analytic censored fraction E[c / (c + b exp(s))], with the expectation
/// estimated from `draws` Monte Carlo score samples.
double expected_censored_fraction(const GeneratorSpec& spec, double censoring_rate,
                                  std::size_t draws = 20000);

/// Censoring rate whose expected censored fraction equals `fraction`.
double solve_censoring_rate(const GeneratorSpec& spec, double fraction);

}  // namespace mbsurv
