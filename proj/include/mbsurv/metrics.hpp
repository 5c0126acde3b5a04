#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mbsurv/data_model.hpp"

namespace mbsurv {

/// Right-continuous step function: probability at the largest grid time <= t,
/// 1 before the first grid time.
struct SurvivalCurve {
  std::vector<double> times;
  std::vector<double> probabilities;

  double at(double t) const;
  /// Left limit S(t-).
  double before(double t) const;
  /// Throws ValidationError unless sorted, in [0,1], and nonincreasing.
  void validate() const;
};

enum class KmTarget { event, censoring };

/// Product-limit estimator. With target = censoring the event indicator is
/// flipped, giving the censoring survival function G(t).
SurvivalCurve kaplan_meier(std::span<const SurvivalOutcome> outcomes, KmTarget target = KmTarget::event);

/// Comparable pairs: t_i < t_j with a death at t_i; concordant if score_i > score_j,
/// score ties count 1/2. Throws UndefinedMetricError without comparable pairs.
double harrell_cindex(std::span<const double> scores, std::span<const SurvivalOutcome> outcomes);

/// Largest death time in the sample (default truncation for the IPCW C-index).
double default_tau(std::span<const SurvivalOutcome> outcomes);

/// Uno's IPCW concordance: pairs anchored at deaths with t_i < tau weighted by
/// 1 / G(t_i-)^2, where G is the censoring survival curve fitted on training data.
double ipcw_cindex(std::span<const double> scores, const SurvivalCurve& censoring,
                   std::span<const SurvivalOutcome> test_outcomes, double tau);
double ipcw_cindex(std::span<const double> scores, std::span<const SurvivalOutcome> train_outcomes,
                   std::span<const SurvivalOutcome> test_outcomes, std::optional<double> tau = {});

/// Breslow cumulative baseline hazard, a step function over the distinct death times.
struct BaselineHazard {
  std::vector<double> times;
  std::vector<double> cumulative_hazard;

  double at(double t) const;
  /// S(t | g) = exp(-H0(t) exp(g)) on the baseline grid.
  SurvivalCurve survival(double score) const;

  json to_json() const;
  static BaselineHazard from_json(const json& j);
};

BaselineHazard breslow_baseline(std::span<const double> scores, std::span<const SurvivalOutcome> outcomes);

/// Nelson-Aalen cumulative hazard (breslow_baseline with all scores zero).
BaselineHazard nelson_aalen(std::span<const SurvivalOutcome> outcomes);

struct BrierOptions {
  /// When set, uses Graf's inverse-probability-of-censoring weighting with this
  /// censoring curve instead of the plain average over the known-status set.
  const SurvivalCurve* graf_censoring = nullptr;
};

/// BS(t) = (1/|N*|) sum_{i in N*} (1{T_i > t} - S_i(t))^2 over N*, the patients
/// who died or were censored after t. nullopt when N* is empty.
std::optional<double> brier_score(std::span<const SurvivalCurve> curves,
                                  std::span<const SurvivalOutcome> outcomes, double t,
                                  const BrierOptions& options = {});

struct IntegratedBrier {
  double value = 0.0;
  std::vector<double> grid;        // unique test times where BS was defined
  std::vector<double> scores;      // BS on the grid
  std::size_t excluded_points = 0; // grid times with empty N*
  double t_min = 0.0;
  double t_max = 0.0;
};

/// Trapezoidal integral of BS over the unique test times, divided by t_max - t_min.
IntegratedBrier integrated_brier(std::span<const SurvivalCurve> curves,
                                 std::span<const SurvivalOutcome> outcomes,
                                 const BrierOptions& options = {});

/// sqrt(mean((y - yhat)^2)) / (max(y) - min(y)).
double nrmse(std::span<const double> truth, std::span<const double> imputed);

double imputation_accuracy(std::span<const int> truth, std::span<const int> imputed);

/// Pairwise-complete Pearson correlation; nullopt marks undefined entries.
struct CorrelationMatrix {
  std::size_t size = 0;
  std::vector<std::optional<double>> values;  // row-major

  std::optional<double> operator()(std::size_t i, std::size_t j) const { return values[i * size + j]; }
};

std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

/// Continuous features enter as bin representatives, categorical ones as
/// their integer codes.
CorrelationMatrix feature_correlation(const Cohort& cohort, const BinningSpec& binning);

}  // namespace mbsurv
