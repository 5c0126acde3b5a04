#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mbsurv/data_model.hpp"
#include "mbsurv/imputer.hpp"
#include "mbsurv/metrics.hpp"
#include "mbsurv/risk_model.hpp"
#include "mbsurv/survival_trainer.hpp"

namespace mbsurv {

inline constexpr int kDefaultFolds = 5;
inline constexpr int kDefaultImputeRepeats = 5;
inline const std::vector<int> kDefaultDropCounts = {1, 2, 3, 4};

/// Stable 16-hex-digit digest of a JSON document's compact text.
std::string digest(const json& j);

// ---------------------------------------------------------------- imputer artifacts

/// Everything needed to impute a raw cohort: bins fitted on training data and
/// the latent-class model fitted on the discretized training data.
struct ImputerBundle {
  BinningSpec binning;
  LatentClassModel model;

  json to_json() const;
  static ImputerBundle from_json(const json& j, const FeatureSchema& schema);
};

struct ImputerFit {
  ImputerBundle bundle;
  EmFit em;
};

ImputerFit fit_imputer(const RawCohort& training, int latent_states, const EmConfig& config);

/// Fills every missing value of a raw cohort. Continuous values imputed as a
/// state are reported as the bin representative.
RawCohort impute_cohort(const ImputerBundle& bundle, const RawCohort& cohort, ImputeMode mode,
                        std::uint64_t seed);

// ---------------------------------------------------------------- survival artifacts

struct SurvivalSettings {
  int latent_states = kDefaultLatentStates;
  EmConfig em;
  Architecture architecture = Architecture::linear();
  TrainConfig train;
  bool memory_bank = true;
};

/// Fitted pipeline: every component depends on the training split only.
struct SurvivalBundle {
  std::string schema_fingerprint;
  BinningSpec binning;
  LatentClassModel imputer;
  FeatureEncoder encoder;
  RiskModel model;
  BaselineHazard baseline;
  SurvivalCurve censoring;  // Kaplan-Meier of the training censoring times

  json to_json() const;
  static SurvivalBundle from_json(const json& j, const FeatureSchema& schema);
};

struct SurvivalFit {
  SurvivalBundle bundle;
  TrainResult training;
  EmFit em;
};

SurvivalFit fit_survival(const RawCohort& training, const SurvivalSettings& settings);

/// Risk scores of a raw cohort: discretize, MAP-impute, encode, forward.
std::vector<double> predict_scores(const SurvivalBundle& bundle, const RawCohort& cohort);

struct EvaluationReport {
  std::size_t n = 0;
  std::size_t deaths = 0;
  double tau = 0.0;
  bool tau_is_default = true;
  std::optional<double> ipcw_cindex;
  std::optional<double> harrell_cindex;
  std::optional<IntegratedBrier> ibs;
  std::vector<std::string> notes;  // reasons for undefined metrics

  json to_json() const;
};

/// Metrics of given scores. Undefined metrics are left empty with a note.
EvaluationReport evaluate_scores(std::span<const double> scores, const BaselineHazard& baseline,
                                 const SurvivalCurve& censoring,
                                 std::span<const SurvivalOutcome> test_outcomes,
                                 std::optional<double> tau = {}, const BrierOptions& brier = {});

EvaluationReport evaluate(const SurvivalBundle& bundle, const RawCohort& test, std::optional<double> tau = {},
                          bool graf_weighting = false);

// ---------------------------------------------------------------- cross-validation

/// Fold index per patient. Deaths and censored patients are shuffled
/// separately and dealt round-robin, so fold sizes differ by at most one and
/// deaths spread evenly.
std::vector<int> stratified_folds(std::span<const SurvivalOutcome> outcomes, int folds, std::uint64_t seed);

struct FoldReport {
  int fold = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::size_t test_deaths = 0;
  bool flagged = false;  // no test deaths: excluded from the C-index summary
  EvaluationReport metrics;
  std::string artifact_digest;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
  std::size_t count = 0;
};

std::optional<MeanStd> mean_std(std::span<const double> values);

/// "77.68±4.51": both numbers scaled by `scale` with two decimals.
std::string format_mean_std(const MeanStd& value, double scale = 100.0);

struct CrossValidationReport {
  int folds = 0;
  std::uint64_t seed = 0;
  std::vector<FoldReport> fold_reports;
  std::optional<MeanStd> ipcw_cindex;
  std::optional<MeanStd> harrell_cindex;
  std::optional<MeanStd> ibs;

  json to_json() const;
  std::string to_csv() const;
};

CrossValidationReport cross_validate(const RawCohort& cohort, int folds, const SurvivalSettings& settings,
                                     std::uint64_t seed);

// ---------------------------------------------------------------- imputation experiment

struct ImputeEvalConfig {
  std::vector<int> drop_counts = kDefaultDropCounts;
  int repeats = kDefaultImputeRepeats;
  int latent_states = kDefaultLatentStates;
  EmConfig em;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ImputeEvalRow {
  std::string method;
  int drop_count = 0;
  /// Means over repeats; empty when no entry of that kind was masked.
  std::optional<double> accuracy;
  std::optional<double> nrmse;
  std::vector<double> accuracy_by_repeat;
  std::vector<double> nrmse_by_repeat;
};

struct ImputeEvalReport {
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::vector<ImputeEvalRow> rows;

  const ImputeEvalRow& row(const std::string& method, int drop_count) const;
  json to_json() const;
  std::string to_csv() const;
};

/// Masks `drop_count` maskable features of every complete test record, imputes
/// them with the latent-class model (expectation and MAP) and the mean
/// baseline, and scores categorical accuracy and continuous NRMSE. NRMSE is
/// normalized by the range of the feature over the whole test set and averaged
/// over continuous features.
ImputeEvalReport run_impute_eval(const RawCohort& training, const RawCohort& test,
                                 const ImputeEvalConfig& config);

}  // namespace mbsurv
