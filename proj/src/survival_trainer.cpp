#include "mbsurv/survival_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mbsurv/errors.hpp"
#include "mbsurv/rng.hpp"

namespace mbsurv {

// ---------------------------------------------------------------- risk sets

RiskSetIndex::RiskSetIndex(std::span<const SurvivalOutcome> outcomes) {
  const std::size_t n = outcomes.size();
  order_.resize(n);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::stable_sort(order_.begin(), order_.end(),
                   [&](std::size_t a, std::size_t b) { return outcomes[a].time < outcomes[b].time; });
  begin_.resize(n);
  std::size_t p = 0;
  while (p < n) {
    std::size_t q = p;
    const double t = outcomes[order_[p]].time;
    while (q < n && outcomes[order_[q]].time == t) ++q;
    for (std::size_t r = p; r < q; ++r) begin_[order_[r]] = p;
    p = q;
  }
  deaths_ = static_cast<std::size_t>(
      std::count_if(outcomes.begin(), outcomes.end(), [](const SurvivalOutcome& o) { return o.event; }));
}

std::vector<std::size_t> RiskSetIndex::risk_set(std::size_t n) const {
  return {order_.begin() + static_cast<std::ptrdiff_t>(begin_.at(n)), order_.end()};
}

CoxLoss cox_loss(std::span<const double> scores, std::span<const SurvivalOutcome> outcomes,
                 const RiskSetIndex& index) {
  const std::size_t n = scores.size();
  if (outcomes.size() != n || index.size() != n)
    throw ValidationError("cox_loss: scores, outcomes and risk-set index differ in length");
  if (index.death_count() == 0)
    throw AllCensoredError("all-censored: the partial likelihood needs at least one death");
  for (double s : scores)
    if (!std::isfinite(s)) throw ValidationError("cox_loss: non-finite risk score");

  const auto& order = index.order();
  const double shift = *std::max_element(scores.begin(), scores.end());
  // suffix[p] = sum over order[p..] of exp(g - shift)
  std::vector<double> suffix(n + 1, 0.0);
  for (std::size_t p = n; p-- > 0;) suffix[p] = suffix[p + 1] + std::exp(scores[order[p]] - shift);

  CoxLoss out;
  out.deaths = index.death_count();
  const double inv_deaths = 1.0 / static_cast<double>(out.deaths);
  // per risk-set start: accumulated 1 / denominator for the deaths sharing it
  std::vector<double> start_weight(n, 0.0);
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t m = order[p];
    if (!outcomes[m].event) continue;
    const std::size_t b = index.risk_set_begin(m);
    total += (scores[m] - shift) - std::log(suffix[b]);
    start_weight[b] += 1.0 / suffix[b];
  }
  out.loss = -total * inv_deaths;

  out.gradient.assign(n, 0.0);
  double running = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    running += start_weight[p];
    const std::size_t m = order[p];
    const double expected = std::exp(scores[m] - shift) * running;
    out.gradient[m] = -((outcomes[m].event ? 1.0 : 0.0) - expected) * inv_deaths;
  }
  return out;
}

double relative_death_risk(std::span<const double> scores, std::span<const std::size_t> risk_set,
                           std::size_t n) {
  if (std::find(risk_set.begin(), risk_set.end(), n) == risk_set.end())
    throw ValidationError("relative_death_risk: patient is not in its own risk set");
  double shift = -std::numeric_limits<double>::infinity();
  for (auto m : risk_set) shift = std::max(shift, scores[m]);
  double denom = 0.0;
  for (auto m : risk_set) denom += std::exp(scores[m] - shift);
  return std::exp(scores[n] - shift) / denom;
}

// ---------------------------------------------------------------- memory bank

MemoryBank::MemoryBank(std::vector<std::string> patient_ids, std::uint64_t seed)
    : ids_(std::move(patient_ids)) {
  auto rng = make_rng(seed, "memory-bank");
  scores_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!slot_.emplace(ids_[i], i).second)
      throw ValidationError("memory bank: duplicate patient id '" + ids_[i] + "'");
    scores_.push_back(uniform01(rng));
  }
}

double MemoryBank::get(const std::string& id) const {
  auto it = slot_.find(id);
  if (it == slot_.end()) throw ValidationError("memory bank has no entry for '" + id + "'");
  return scores_[it->second];
}

void MemoryBank::set(const std::string& id, double score) {
  auto it = slot_.find(id);
  if (it == slot_.end()) throw ValidationError("memory bank has no entry for '" + id + "'");
  set_at(it->second, score);
}

void MemoryBank::set_at(std::size_t i, double score) {
  if (!std::isfinite(score)) throw ValidationError("memory bank: non-finite score for '" + ids_.at(i) + "'");
  scores_.at(i) = score;
}

CoxLoss memory_bank_loss(const MemoryBank& bank, std::span<const std::size_t> live,
                         std::span<const SurvivalOutcome> outcomes, const RiskSetIndex& index) {
  CoxLoss result = cox_loss(bank.values(), outcomes, index);
  std::vector<char> is_live(bank.size(), 0);
  for (auto i : live) is_live.at(i) = 1;
  for (std::size_t i = 0; i < bank.size(); ++i)
    if (!is_live[i]) result.gradient[i] = 0.0;
  return result;
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("learning rate must be positive");
  if (lr_decay_epoch < 0) throw ValidationError("lr_decay_epoch must be >= 0");
  if (!(lr_decay_factor > 0.0)) throw ValidationError("lr_decay_factor must be positive");
}

double TrainConfig::lr_at(int epoch) const {
  return epoch > lr_decay_epoch ? lr * lr_decay_factor : lr;
}

json to_json(const EpochLog& entry) {
  return {{"epoch", entry.epoch},
          {"lr", entry.lr},
          {"fresh_loss", entry.fresh_loss},
          {"skip_count", entry.skip_count}};
}

namespace {

TrainResult run_training(const Cohort& cohort, const LatentClassModel& imputer,
                         const FeatureEncoder& encoder, RiskModel model, const TrainConfig& config,
                         const StepObserver& observer, bool use_bank) {
  config.validate();
  const auto outcomes = cohort.outcome_span();
  const std::size_t n = cohort.size();
  if (encoder.width() != model.input_width())
    throw ValidationError("encoder width does not match the risk model input width");
  const RiskSetIndex full_index(outcomes);
  if (full_index.death_count() == 0)
    throw AllCensoredError("all-censored: training cohort contains no deaths");

  const CohortPosterior posterior(imputer, cohort);
  const Eigen::MatrixXd map_features = encoder.encode(posterior.map_records());

  auto shuffle_rng = make_rng(config.seed, "batch-shuffle");
  auto impute_rng = make_rng(config.seed, "train-imputation");
  std::vector<std::string> ids;
  ids.reserve(n);
  for (const auto& r : cohort.records) ids.push_back(r.patient_id);
  MemoryBank bank = use_bank ? MemoryBank(std::move(ids), derive_seed(config.seed, "memory-bank-init"))
                             : MemoryBank();

  TrainResult result;
  result.training_deaths = full_index.death_count();
  result.min_step_deaths = std::numeric_limits<std::size_t>::max();
  AdamState adam = AdamState::for_model(model, config.adam);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const auto batch_size = static_cast<std::size_t>(config.batch_size);

  std::vector<ClinicalRecord> batch_records;
  ForwardCache cache;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = config.lr_at(epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[shuffle_rng() % i]);

    std::size_t epoch_skips = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::span<const std::size_t> batch(perm.data() + start, std::min(batch_size, n - start));
      ++result.total_batches;

      batch_records.clear();
      for (auto i : batch)
        batch_records.push_back(config.imputation == TrainingImputation::sample
                                    ? posterior.sample(i, impute_rng)
                                    : posterior.map(i));
      const Eigen::VectorXd live = forward(model, encoder.encode(batch_records), &cache);

      Eigen::VectorXd upstream(static_cast<Eigen::Index>(batch.size()));
      std::size_t step_deaths = 0;
      if (use_bank) {
        for (std::size_t j = 0; j < batch.size(); ++j) bank.set_at(batch[j], live(static_cast<Eigen::Index>(j)));
        const CoxLoss loss = memory_bank_loss(bank, batch, outcomes, full_index);
        for (std::size_t j = 0; j < batch.size(); ++j) upstream(static_cast<Eigen::Index>(j)) = loss.gradient[batch[j]];
        step_deaths = loss.deaths;
      } else {
        // evaluate in cohort order so that a full batch matches the bank path bit for bit
        std::vector<std::size_t> sorted(batch.begin(), batch.end());
        std::sort(sorted.begin(), sorted.end());
        std::vector<double> sub_scores(sorted.size());
        std::vector<SurvivalOutcome> sub_outcomes(sorted.size());
        for (std::size_t j = 0; j < batch.size(); ++j) {
          const auto pos = static_cast<std::size_t>(
              std::lower_bound(sorted.begin(), sorted.end(), batch[j]) - sorted.begin());
          sub_scores[pos] = live(static_cast<Eigen::Index>(j));
        }
        for (std::size_t p = 0; p < sorted.size(); ++p) sub_outcomes[p] = outcomes[sorted[p]];
        const RiskSetIndex sub_index(sub_outcomes);
        if (sub_index.death_count() == 0) {
          ++epoch_skips;
          ++result.skipped_batches;
          continue;
        }
        const CoxLoss loss = cox_loss(sub_scores, sub_outcomes, sub_index);
        for (std::size_t j = 0; j < batch.size(); ++j) {
          const auto pos = static_cast<std::size_t>(
              std::lower_bound(sorted.begin(), sorted.end(), batch[j]) - sorted.begin());
          upstream(static_cast<Eigen::Index>(j)) = loss.gradient[pos];
        }
        step_deaths = loss.deaths;
      }

      const LayerTensors grads = backward(model, cache, upstream);
      adam_step(model, grads, adam, lr);
      ++result.steps;
      result.min_step_deaths = std::min(result.min_step_deaths, step_deaths);
      result.max_step_deaths = std::max(result.max_step_deaths, step_deaths);
      if (observer) observer(model);
    }

    const Eigen::VectorXd fresh = forward(model, map_features);
    const CoxLoss fresh_loss =
        cox_loss(std::span<const double>(fresh.data(), static_cast<std::size_t>(fresh.size())), outcomes,
                 full_index);
    result.log.push_back({epoch, lr, fresh_loss.loss, epoch_skips});
  }
  if (result.steps == 0) result.min_step_deaths = 0;
  result.model = std::move(model);
  return result;
}

}  // namespace

TrainResult train(const Cohort& cohort, const LatentClassModel& imputer, const FeatureEncoder& encoder,
                  RiskModel model, const TrainConfig& config, const StepObserver& observer) {
  return run_training(cohort, imputer, encoder, std::move(model), config, observer, true);
}

TrainResult train_without_bank(const Cohort& cohort, const LatentClassModel& imputer,
                               const FeatureEncoder& encoder, RiskModel model,
                               const TrainConfig& config, const StepObserver& observer) {
  return run_training(cohort, imputer, encoder, std::move(model), config, observer, false);
}

}  // namespace mbsurv
