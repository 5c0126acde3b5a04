#include "mbsurv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mbsurv/diagnostics.hpp"
#include "mbsurv/errors.hpp"

namespace mbsurv {

namespace {

void require_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": inputs differ in length");
}

/// Fenwick tree over score ranks holding weighted counts.
class RankTree {
 public:
  explicit RankTree(std::size_t n) : tree_(n + 1, 0.0) {}
  void add(std::size_t rank, double w) {
    for (std::size_t i = rank + 1; i < tree_.size(); i += i & (~i + 1)) tree_[i] += w;
  }
  /// Total weight of ranks < rank.
  double below(std::size_t rank) const {
    double s = 0.0;
    for (std::size_t i = rank; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<double> tree_;
};

struct PairCounts {
  double concordant = 0.0;  // including 1/2 per tie
  double comparable = 0.0;
};

/// Sums over death-anchored pairs (t_i < t_j) of anchor_weight(i) *
/// [1{s_i > s_j} + 1/2 1{s_i = s_j}], in O(n log n).
template <class AnchorWeight>
PairCounts count_pairs(std::span<const double> scores, std::span<const SurvivalOutcome> outcomes,
                       AnchorWeight&& anchor_weight) {
  const std::size_t n = scores.size();
  std::vector<double> distinct(scores.begin(), scores.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  auto rank = [&](double s) {
    return static_cast<std::size_t>(std::lower_bound(distinct.begin(), distinct.end(), s) - distinct.begin());
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return outcomes[a].time > outcomes[b].time; });

  RankTree tree(distinct.size());
  std::vector<double> at_rank(distinct.size(), 0.0);
  double inserted = 0.0;
  PairCounts counts;
  std::size_t p = 0;
  while (p < n) {
    std::size_t q = p;
    const double t = outcomes[order[p]].time;
    while (q < n && outcomes[order[q]].time == t) ++q;
    // everything in the tree has a strictly later time
    for (std::size_t r = p; r < q; ++r) {
      const std::size_t i = order[r];
      if (!outcomes[i].event || inserted == 0.0) continue;
      const double w = anchor_weight(i);
      if (w == 0.0) continue;
      const std::size_t k = rank(scores[i]);
      counts.concordant += w * (tree.below(k) + 0.5 * at_rank[k]);
      counts.comparable += w * inserted;
    }
    for (std::size_t r = p; r < q; ++r) {
      const std::size_t k = rank(scores[order[r]]);
      tree.add(k, 1.0);
      at_rank[k] += 1.0;
      inserted += 1.0;
    }
    p = q;
  }
  return counts;
}

double step_lookup(const std::vector<double>& times, const std::vector<double>& values, double t,
                   double before_first, bool inclusive) {
  const auto it = inclusive ? std::upper_bound(times.begin(), times.end(), t)
                            : std::lower_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return before_first;
  return values[static_cast<std::size_t>(it - times.begin()) - 1];
}

}  // namespace

// ---------------------------------------------------------------- curves

double SurvivalCurve::at(double t) const { return step_lookup(times, probabilities, t, 1.0, true); }

double SurvivalCurve::before(double t) const { return step_lookup(times, probabilities, t, 1.0, false); }

void SurvivalCurve::validate() const {
  if (times.size() != probabilities.size()) throw ValidationError("survival curve: length mismatch");
  double prev = 1.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (i > 0 && !(times[i] > times[i - 1])) throw ValidationError("survival curve: times not increasing");
    const double p = probabilities[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("survival curve: probability outside [0,1]");
    if (p > prev) throw ValidationError("survival curve: probabilities increase");
    prev = p;
  }
}

SurvivalCurve kaplan_meier(std::span<const SurvivalOutcome> outcomes, KmTarget target) {
  if (outcomes.empty()) throw ValidationError("kaplan_meier: no outcomes");
  std::vector<std::size_t> order(outcomes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return outcomes[a].time < outcomes[b].time; });
  const bool want_event = target == KmTarget::event;

  SurvivalCurve curve;
  double s = 1.0;
  std::size_t at_risk = outcomes.size();
  std::size_t p = 0;
  while (p < order.size()) {
    std::size_t q = p;
    std::size_t d = 0;
    const double t = outcomes[order[p]].time;
    for (; q < order.size() && outcomes[order[q]].time == t; ++q)
      if (outcomes[order[q]].event == want_event) ++d;
    if (d > 0) {
      s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      curve.times.push_back(t);
      curve.probabilities.push_back(s);
    }
    at_risk -= q - p;
    p = q;
  }
  return curve;
}

// ---------------------------------------------------------------- concordance

double harrell_cindex(std::span<const double> scores, std::span<const SurvivalOutcome> outcomes) {
  require_aligned(scores.size(), outcomes.size(), "harrell_cindex");
  const auto counts = count_pairs(scores, outcomes, [](std::size_t) { return 1.0; });
  if (counts.comparable == 0.0) throw UndefinedMetricError("harrell_cindex: no comparable pairs");
  return counts.concordant / counts.comparable;
}

double default_tau(std::span<const SurvivalOutcome> outcomes) {
  double tau = -1.0;
  for (const auto& o : outcomes)
    if (o.event) tau = std::max(tau, o.time);
  if (tau < 0.0) throw UndefinedMetricError("no deaths: truncation time tau is undefined");
  return tau;
}

double ipcw_cindex(std::span<const double> scores, const SurvivalCurve& censoring,
                   std::span<const SurvivalOutcome> test_outcomes, double tau) {
  require_aligned(scores.size(), test_outcomes.size(), "ipcw_cindex");
  if (test_outcomes.empty()) throw ValidationError("ipcw_cindex: no test outcomes");
  double max_time = 0.0;
  for (const auto& o : test_outcomes) max_time = std::max(max_time, o.time);
  if (tau > max_time) throw ValidationError("ipcw_cindex: tau exceeds the largest test time");

  const auto counts = count_pairs(scores, test_outcomes, [&](std::size_t i) {
    const double t = test_outcomes[i].time;
    if (!(t < tau)) return 0.0;
    const double g = censoring.before(t);
    if (!(g > 0.0))
      throw UndefinedMetricError("ipcw_cindex: censoring survival is 0 before t=" + format_double(t) +
                                 "; choose a smaller tau");
    return 1.0 / (g * g);
  });
  if (counts.comparable == 0.0) throw UndefinedMetricError("ipcw_cindex: no comparable pairs before tau");
  return counts.concordant / counts.comparable;
}

double ipcw_cindex(std::span<const double> scores, std::span<const SurvivalOutcome> train_outcomes,
                   std::span<const SurvivalOutcome> test_outcomes, std::optional<double> tau) {
  const auto censoring = kaplan_meier(train_outcomes, KmTarget::censoring);
  return ipcw_cindex(scores, censoring, test_outcomes, tau ? *tau : default_tau(test_outcomes));
}

// ---------------------------------------------------------------- baseline hazard

double BaselineHazard::at(double t) const { return step_lookup(times, cumulative_hazard, t, 0.0, true); }

SurvivalCurve BaselineHazard::survival(double score) const {
  SurvivalCurve curve;
  curve.times = times;
  curve.probabilities.reserve(times.size());
  // log form keeps an underflowed hazard with a huge score from producing 0 * inf
  for (double h : cumulative_hazard) curve.probabilities.push_back(h > 0.0 ? std::exp(-std::exp(std::log(h) + score)) : 1.0);
  return curve;
}

json BaselineHazard::to_json() const { return {{"times", times}, {"cumulative_hazard", cumulative_hazard}}; }

BaselineHazard BaselineHazard::from_json(const json& j) {
  BaselineHazard b{j.at("times").get<std::vector<double>>(), j.at("cumulative_hazard").get<std::vector<double>>()};
  if (b.times.size() != b.cumulative_hazard.size()) throw ValidationError("baseline hazard: length mismatch");
  return b;
}

BaselineHazard breslow_baseline(std::span<const double> scores, std::span<const SurvivalOutcome> outcomes) {
  require_aligned(scores.size(), outcomes.size(), "breslow_baseline");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return outcomes[a].time < outcomes[b].time; });
  const double shift = n ? *std::max_element(scores.begin(), scores.end()) : 0.0;
  std::vector<double> suffix(n + 1, 0.0);
  for (std::size_t p = n; p-- > 0;) suffix[p] = suffix[p + 1] + std::exp(scores[order[p]] - shift);

  BaselineHazard base;
  double cumulative = 0.0;
  std::size_t p = 0;
  while (p < n) {
    std::size_t q = p;
    std::size_t d = 0;
    const double t = outcomes[order[p]].time;
    for (; q < n && outcomes[order[q]].time == t; ++q)
      if (outcomes[order[q]].event) ++d;
    if (d > 0) {
      cumulative += static_cast<double>(d) * std::exp(-shift) / suffix[p];
      base.times.push_back(t);
      base.cumulative_hazard.push_back(cumulative);
    }
    p = q;
  }
  if (base.times.empty()) throw AllCensoredError("breslow_baseline: no deaths");
  return base;
}

BaselineHazard nelson_aalen(std::span<const SurvivalOutcome> outcomes) {
  const std::vector<double> zeros(outcomes.size(), 0.0);
  return breslow_baseline(zeros, outcomes);
}

// ---------------------------------------------------------------- Brier score

std::optional<double> brier_score(std::span<const SurvivalCurve> curves,
                                  std::span<const SurvivalOutcome> outcomes, double t,
                                  const BrierOptions& options) {
  require_aligned(curves.size(), outcomes.size(), "brier_score");
  if (options.graf_censoring) {
    const auto& g = *options.graf_censoring;
    double total = 0.0;
    for (std::size_t i = 0; i < curves.size(); ++i) {
      const auto& o = outcomes[i];
      const double s = curves[i].at(t);
      if (o.time <= t && o.event) {
        const double w = g.before(o.time);
        if (w > 0.0) total += s * s / w;
      } else if (o.time > t) {
        const double w = g.at(t);
        if (w > 0.0) total += (1.0 - s) * (1.0 - s) / w;
      }
    }
    if (curves.empty()) return std::nullopt;
    return total / static_cast<double>(curves.size());
  }

  double total = 0.0;
  std::size_t known = 0;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& o = outcomes[i];
    if (!o.event && !(o.time > t)) continue;  // censored at or before t: status unknown
    const double alive = o.time > t ? 1.0 : 0.0;
    const double diff = alive - curves[i].at(t);
    total += diff * diff;
    ++known;
  }
  if (known == 0) return std::nullopt;
  return total / static_cast<double>(known);
}

IntegratedBrier integrated_brier(std::span<const SurvivalCurve> curves,
                                 std::span<const SurvivalOutcome> outcomes, const BrierOptions& options) {
  require_aligned(curves.size(), outcomes.size(), "integrated_brier");
  std::vector<double> times;
  for (const auto& o : outcomes) times.push_back(o.time);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  if (times.size() < 2) throw UndefinedMetricError("integrated_brier: need at least 2 distinct test times");

  IntegratedBrier out;
  for (double t : times) {
    if (auto bs = brier_score(curves, outcomes, t, options)) {
      out.grid.push_back(t);
      out.scores.push_back(*bs);
    } else {
      ++out.excluded_points;
    }
  }
  if (out.excluded_points > 0)
    warn("integrated_brier: Brier score undefined at " + std::to_string(out.excluded_points) +
         " grid time(s); excluded from integration");
  if (out.grid.size() < 2 || !(out.grid.back() > out.grid.front()))
    throw UndefinedMetricError("integrated_brier: degenerate integration interval");
  out.t_min = out.grid.front();
  out.t_max = out.grid.back();
  double area = 0.0;
  for (std::size_t i = 1; i < out.grid.size(); ++i)
    area += 0.5 * (out.scores[i] + out.scores[i - 1]) * (out.grid[i] - out.grid[i - 1]);
  out.value = area / (out.t_max - out.t_min);
  return out;
}

// ---------------------------------------------------------------- imputation quality

double nrmse(std::span<const double> truth, std::span<const double> imputed) {
  require_aligned(truth.size(), imputed.size(), "nrmse");
  if (truth.empty()) throw UndefinedMetricError("nrmse: empty input");
  const auto [lo, hi] = std::minmax_element(truth.begin(), truth.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) throw UndefinedMetricError("nrmse: true values have zero range");
  double sq = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) sq += (truth[i] - imputed[i]) * (truth[i] - imputed[i]);
  return std::sqrt(sq / static_cast<double>(truth.size())) / range;
}

double imputation_accuracy(std::span<const int> truth, std::span<const int> imputed) {
  require_aligned(truth.size(), imputed.size(), "imputation_accuracy");
  if (truth.empty()) throw UndefinedMetricError("imputation_accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == imputed[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  require_aligned(x.size(), y.size(), "pearson");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

CorrelationMatrix feature_correlation(const Cohort& cohort, const BinningSpec& binning) {
  const auto& schema = cohort.schema;
  const std::size_t k = schema.size();
  auto value = [&](std::size_t f, int state) {
    return schema[f].is_continuous() ? binning.at(f).representatives.at(static_cast<std::size_t>(state))
                                     : static_cast<double>(state);
  };
  CorrelationMatrix out{k, std::vector<std::optional<double>>(k * k)};
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i; j < k; ++j) {
      std::vector<double> x, y;
      for (const auto& r : cohort.records) {
        if (!r.states[i] || !r.states[j]) continue;
        x.push_back(value(i, *r.states[i]));
        y.push_back(value(j, *r.states[j]));
      }
      auto r = pearson(x, y);
      if (i == j && r) r = 1.0;
      out.values[i * k + j] = r;
      out.values[j * k + i] = r;
    }
  }
  return out;
}

}  // namespace mbsurv
