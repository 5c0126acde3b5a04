#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mbsurv/data_model.hpp"
#include "mbsurv/imputer.hpp"
#include "mbsurv/risk_model.hpp"

namespace mbsurv {

/// Patients ordered by time; the risk set of a death at t_n is every patient
/// with t_m >= t_n, i.e. a suffix of that order. Tied death times share one
/// risk set that contains all of them (Breslow).
class RiskSetIndex {
 public:
  RiskSetIndex() = default;
  explicit RiskSetIndex(std::span<const SurvivalOutcome> outcomes);

  std::size_t size() const { return order_.size(); }
  std::size_t death_count() const { return deaths_; }
  /// Patient indices sorted by ascending time (stable for ties).
  const std::vector<std::size_t>& order() const { return order_; }
  /// Position in order() where the risk set of patient n begins.
  std::size_t risk_set_begin(std::size_t n) const { return begin_[n]; }
  std::vector<std::size_t> risk_set(std::size_t n) const;

 private:
  std::vector<std::size_t> order_;
  std::vector<std::size_t> begin_;
  std::size_t deaths_ = 0;
};

struct CoxLoss {
  double loss = 0.0;
  std::vector<double> gradient;  // d loss / d score, aligned with the scores
  std::size_t deaths = 0;
};

/// Negative partial log-likelihood averaged over deaths,
/// -(1/|D|) sum_{n in D} [g_n - log sum_{m in R_n} exp(g_m)], with gradient.
/// Throws AllCensoredError when there is no death.
CoxLoss cox_loss(std::span<const double> scores, std::span<const SurvivalOutcome> outcomes,
                 const RiskSetIndex& index);

/// exp(g_n) / sum_{m in R_n} exp(g_m). `risk_set` must contain n.
double relative_death_risk(std::span<const double> scores, std::span<const std::size_t> risk_set,
                           std::size_t n);

/// Last-known risk score per training patient.
class MemoryBank {
 public:
  MemoryBank() = default;
  /// One entry per id, initialized uniformly on [0, 1) from `seed`.
  MemoryBank(std::vector<std::string> patient_ids, std::uint64_t seed);

  std::size_t size() const { return scores_.size(); }
  bool contains(const std::string& id) const { return slot_.count(id) != 0; }
  double get(const std::string& id) const;
  void set(const std::string& id, double score);
  /// Slot access by cohort index (ids are stored in cohort order).
  double at(std::size_t i) const { return scores_.at(i); }
  void set_at(std::size_t i, double score);
  const std::vector<double>& values() const { return scores_; }
  const std::vector<std::string>& ids() const { return ids_; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> slot_;
  std::vector<double> scores_;
};

/// Cox loss over every bank entry. Entries outside `live` are stale constants:
/// their gradient entries are exactly zero.
CoxLoss memory_bank_loss(const MemoryBank& bank, std::span<const std::size_t> live,
                         std::span<const SurvivalOutcome> outcomes, const RiskSetIndex& index);

enum class TrainingImputation { sample, map };

inline constexpr int kDefaultEpochs = 100;
inline constexpr int kDefaultLrDecayEpoch = 30;
inline constexpr double kDefaultLrDecayFactor = 0.1;
inline constexpr int kDefaultBatchSize = 16;

struct TrainConfig {
  int epochs = kDefaultEpochs;
  int batch_size = kDefaultBatchSize;
  double lr = kLearningRateSingleModality;
  /// Epochs run at `lr` before it is multiplied by lr_decay_factor.
  int lr_decay_epoch = kDefaultLrDecayEpoch;
  double lr_decay_factor = kDefaultLrDecayFactor;
  std::uint64_t seed = 0;
  TrainingImputation imputation = TrainingImputation::sample;
  AdamConfig adam;

  void validate() const;
  /// Learning rate used during 1-based epoch `epoch`.
  double lr_at(int epoch) const;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double fresh_loss = 0.0;      // full-cohort loss with every score recomputed
  std::size_t skip_count = 0;   // batches skipped this epoch (no deaths)
};

struct TrainResult {
  RiskModel model;
  std::vector<EpochLog> log;
  std::size_t steps = 0;
  std::size_t skipped_batches = 0;
  std::size_t total_batches = 0;
  /// Fewest / most deaths entering the loss over all executed steps.
  std::size_t min_step_deaths = 0;
  std::size_t max_step_deaths = 0;
  std::size_t training_deaths = 0;

  double skip_rate() const {
    return total_batches == 0 ? 0.0 : static_cast<double>(skipped_batches) / total_batches;
  }
};

/// Called after every optimizer step with the updated model.
using StepObserver = std::function<void(const RiskModel&)>;

/// Minibatch training where every step evaluates the partial likelihood over
/// the whole cohort: live scores for the batch, memory-bank scores for the rest.
TrainResult train(const Cohort& cohort, const LatentClassModel& imputer, const FeatureEncoder& encoder,
                  RiskModel model, const TrainConfig& config, const StepObserver& observer = {});

/// Conventional minibatch training: the loss uses only the batch's own risk
/// sets; batches without a death are skipped and counted.
TrainResult train_without_bank(const Cohort& cohort, const LatentClassModel& imputer,
                               const FeatureEncoder& encoder, RiskModel model,
                               const TrainConfig& config, const StepObserver& observer = {});

json to_json(const EpochLog& entry);

}  // namespace mbsurv
