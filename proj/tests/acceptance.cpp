// Acceptance suite: runs every criterion at its stated tolerance and prints one
// PASS/FAIL line per criterion. Exit status is nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mbsurv/imputer.hpp"
#include "mbsurv/metrics.hpp"
#include "mbsurv/pipeline.hpp"
#include "mbsurv/synthgen.hpp"
#include "support.hpp"

using namespace mbsurv;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

// ---------------------------------------------------------------- 1

Outcome em_monotonicity() {
  double worst = 0.0;
  int fits = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RandomSpecOptions opt;
    opt.n = 1000;
    opt.categorical_features = 6;
    opt.missingness = 0.3;
    const auto raw = generate(random_spec(opt, seed)).cohort;
    const auto cohort = discretize(raw, fit_binning_spec(raw));
    for (int h : {2, 10, 90}) {
      EmConfig cfg;
      cfg.seed = seed;
      testing::WarningCapture quiet;
      const auto fit = fit_em(cohort, h, cfg);
      const auto& ll = fit.log_likelihood_trace;
      for (std::size_t t = 1; t < ll.size(); ++t) worst = std::max(worst, ll[t - 1] - ll[t]);
      ++fits;
    }
  }
  return {worst <= 1e-9, std::to_string(fits) + " fits, largest log-likelihood decrease " + fmt("%.3g", worst)};
}

// ---------------------------------------------------------------- 2

Outcome posterior_oracle() {
  const std::vector<int> cards{2, 3, 4, 5};
  const auto schema = testing::categorical_schema(cards);
  auto rng = make_rng(2, "posterior-oracle");
  std::vector<std::vector<int>> rows;
  for (int n = 0; n < 300; ++n) {
    std::vector<int> row;
    const int cls = static_cast<int>(rng() % 3);
    for (int c : cards) {
      int v = uniform01(rng) < 0.6 ? (cls % c) : static_cast<int>(rng() % c);
      if (uniform01(rng) < 0.4) v = -1;
      row.push_back(v);
    }
    rows.push_back(row);
  }
  const auto cohort = testing::make_cohort(schema, rows);
  EmConfig cfg;
  cfg.seed = 2;
  const auto model = fit_em(cohort, 4, cfg).model;

  double worst = 0.0;
  std::size_t checked = 0;
  for (const auto& record : cohort.records) {
    const auto post = posterior_missing(model, record);
    const auto missing = record.missing_features();
    if (missing.empty()) continue;
    // joint p(x_m, x_o) for every completion, then normalize and marginalize
    std::vector<std::vector<double>> marg(missing.size());
    for (std::size_t j = 0; j < missing.size(); ++j) marg[j].assign(cards[missing[j]], 0.0);
    std::vector<int> completion(missing.size(), 0);
    double total = 0.0;
    while (true) {
      double joint = 0.0;
      for (int h = 0; h < model.latent_states(); ++h) {
        double p = model.prior()[h];
        for (std::size_t k = 0; k < cards.size(); ++k) {
          const auto it = std::find(missing.begin(), missing.end(), k);
          const int v = it == missing.end() ? *record.states[k] : completion[it - missing.begin()];
          p *= model.emission(k)(h, v);
        }
        joint += p;
      }
      total += joint;
      for (std::size_t j = 0; j < missing.size(); ++j) marg[j][completion[j]] += joint;
      std::size_t j = 0;
      while (j < missing.size() && ++completion[j] == cards[missing[j]]) completion[j++] = 0;
      if (j == missing.size()) break;
    }
    for (std::size_t j = 0; j < missing.size(); ++j) {
      const auto m = post.marginal(j);
      for (std::size_t c = 0; c < m.size(); ++c) worst = std::max(worst, std::abs(m[c] - marg[j][c] / total));
    }
    ++checked;
  }
  return {worst <= 1e-10 && checked > 0,
          std::to_string(checked) + " incomplete records, max abs error " + fmt("%.3g", worst)};
}

// ---------------------------------------------------------------- 3

Outcome imputation_experiment() {
  ClinicalSpecOptions opt;
  opt.n = 2000;
  const auto train = generate(clinical_like_spec(opt, 3)).cohort;
  opt.n = 400;
  opt.missingness = 0.0;
  auto test_spec = clinical_like_spec(opt, 3);
  test_spec.seed = 33;
  const auto test = generate(test_spec).cohort;

  ImputeEvalConfig cfg;
  cfg.seed = 3;
  cfg.em.seed = 3;
  const auto report = run_impute_eval(train, test, cfg);
  bool pass = true;
  std::string detail;
  for (int d : cfg.drop_counts) {
    const auto& lc = report.row("latent_class_expectation", d);
    const auto& mean = report.row("mean", d);
    pass = pass && *lc.accuracy > *mean.accuracy && *lc.nrmse < *mean.nrmse;
    detail += "d=" + std::to_string(d) + fmt(" acc %.3f/%.3f nrmse %.3f/", *lc.accuracy, *mean.accuracy, *lc.nrmse) +
              fmt("%.3f; ", *mean.nrmse);
  }
  return {pass, detail + "(latent class / mean)"};
}

// ---------------------------------------------------------------- 4

Outcome gradient_check() {
  auto rng = make_rng(4, "acceptance-gradcheck");
  double worst = 0.0;
  int redraws = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> hidden{2 + static_cast<int>(rng() % 15)};
    if (trial % 2) hidden.push_back(2 + static_cast<int>(rng() % 8));
    const auto check = testing::cox_gradient_check(Architecture::mlp(hidden), rng, 1e-5);
    worst = std::max(worst, check.relative_error);
    redraws += check.redraws;
  }
  return {worst < 1e-4, "100 trials, max relative error " + fmt("%.3g", worst) + ", " + std::to_string(redraws) +
                            " redraws near a ReLU kink"};
}

// ---------------------------------------------------------------- 5, 6

struct Prepared {
  Cohort cohort;
  LatentClassModel imputer;
  FeatureEncoder encoder;
};

Prepared prepare(double censored_fraction, std::uint64_t seed) {
  ClinicalSpecOptions opt;
  opt.n = 500;
  opt.censored_fraction = censored_fraction;
  const auto raw = generate(clinical_like_spec(opt, seed)).cohort;
  const auto binning = fit_binning_spec(raw);
  Prepared p;
  p.cohort = discretize(raw, binning);
  EmConfig em;
  em.seed = seed;
  testing::WarningCapture quiet;
  p.imputer = fit_em(p.cohort, kDefaultLatentStates, em).model;
  p.encoder = FeatureEncoder::fit(p.cohort, binning);
  return p;
}

double censored_share(const Cohort& c) {
  double censored = 0;
  for (const auto& o : *c.outcomes) censored += !o.event;
  return censored / static_cast<double>(c.size());
}

Outcome memory_bank_equivalence() {
  const auto p = prepare(0.5, 5);
  const RiskModel init(p.encoder.width(), Architecture::linear(), derive_seed(5, "risk-model-init"));

  TrainConfig full;
  full.batch_size = static_cast<int>(p.cohort.size());
  full.seed = 5;
  std::vector<std::vector<double>> bank_path, plain_path;
  const auto bank = train(p.cohort, p.imputer, p.encoder, init, full,
                          [&](const RiskModel& m) { bank_path.push_back(m.flat_parameters()); });
  const auto plain = train_without_bank(p.cohort, p.imputer, p.encoder, init, full,
                                        [&](const RiskModel& m) { plain_path.push_back(m.flat_parameters()); });
  const bool bitwise = bank_path == plain_path && !bank_path.empty() &&
                       bank.model.flat_parameters() == plain.model.flat_parameters();

  // full-batch reference run to convergence on the same objective
  TrainConfig reference = full;
  reference.epochs = 3000;
  reference.lr_decay_epoch = 2000;
  reference.imputation = TrainingImputation::map;
  const auto ref = train(p.cohort, p.imputer, p.encoder, init, reference);
  const double ref_loss = ref.log.back().fresh_loss;

  TrainConfig mini;
  mini.seed = 5;
  const auto minibatch = train(p.cohort, p.imputer, p.encoder, init, mini);
  const double mini_loss = minibatch.log.back().fresh_loss;
  const double gap = (mini_loss - ref_loss) / ref_loss;
  return {bitwise && gap <= 0.05,
          std::string(bitwise ? "batch=N trajectory bitwise equal" : "batch=N trajectory DIFFERS") + " over " +
              std::to_string(bank_path.size()) + " steps; censored " + fmt("%.2f", censored_share(p.cohort)) +
              fmt("; batch-16 loss %.5f vs reference %.5f (gap %+.2f%%)", mini_loss, ref_loss, 100.0 * gap)};
}

Outcome skip_pathology() {
  const auto p = prepare(0.8, 6);
  const RiskModel init(p.encoder.width(), Architecture::linear(), derive_seed(6, "risk-model-init"));
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 10;
  cfg.seed = 6;
  const auto plain = train_without_bank(p.cohort, p.imputer, p.encoder, init, cfg);
  const auto bank = train(p.cohort, p.imputer, p.encoder, init, cfg);
  const bool pass = plain.skip_rate() > 0.0 && bank.skipped_batches == 0 &&
                    bank.min_step_deaths == bank.training_deaths && bank.steps == bank.total_batches;
  return {pass, "censored " + fmt("%.2f", censored_share(p.cohort)) +
                    fmt("; without bank skip rate %.3f; with bank ", plain.skip_rate()) +
                    std::to_string(bank.skipped_batches) + " skips, every step uses " +
                    std::to_string(bank.min_step_deaths) + "/" + std::to_string(bank.training_deaths) + " deaths"};
}

// ---------------------------------------------------------------- 7

double direct_censoring_before(const std::vector<SurvivalOutcome>& y, double t) {
  std::set<double> times;
  for (const auto& o : y)
    if (!o.event && o.time < t) times.insert(o.time);
  double g = 1.0;
  for (double c : times) {
    double at_risk = 0, cens = 0;
    for (const auto& o : y) {
      at_risk += o.time >= c;
      cens += o.time == c && !o.event;
    }
    g *= 1.0 - cens / at_risk;
  }
  return g;
}

// Pairwise definition; with `train` set, anchors before tau weigh 1 / G(t-)^2.
double direct_cindex(const std::vector<double>& s, const std::vector<SurvivalOutcome>& y,
                     const std::vector<SurvivalOutcome>* train, double tau) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i].event) continue;
    double w = 1.0;
    if (train) {
      if (!(y[i].time < tau)) continue;
      w = 1.0 / std::pow(direct_censoring_before(*train, y[i].time), 2);
    }
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!(y[i].time < y[j].time)) continue;
      den += w;
      num += w * (s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / den;
}

Outcome metric_oracles() {
  auto rng = make_rng(7, "metric-oracles");
  double worst = 0.0;
  int instances = 0;
  while (instances < 50) {
    const std::size_t n = 2 + rng() % 199;
    std::vector<double> s(n);
    std::vector<SurvivalOutcome> y(n), train_y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = uniform01(rng) < 0.3 ? static_cast<double>(rng() % 5) : testing::uniform(rng, -3, 3);
      y[i] = {static_cast<double>(rng() % 50), uniform01(rng) < 0.6};
      train_y[i] = {static_cast<double>(rng() % 50), uniform01(rng) < 0.6};
    }
    double tau;
    try {
      tau = default_tau(y);
      const double h = harrell_cindex(s, y);
      worst = std::max(worst, std::abs(h - direct_cindex(s, y, nullptr, 0)));
      const double u = ipcw_cindex(s, train_y, y, tau);
      worst = std::max(worst, std::abs(u - direct_cindex(s, y, &train_y, tau)));
    } catch (const UndefinedMetricError&) {
      continue;
    }
    ++instances;
  }

  double reduction = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng() % 199;
    std::vector<double> s(n);
    std::vector<SurvivalOutcome> y(n), train_y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = testing::uniform(rng, -3, 3);
      y[i] = {static_cast<double>(i), true};
      train_y[i] = {testing::uniform(rng, 0, 10), true};
    }
    reduction = std::max(reduction, std::abs(ipcw_cindex(s, train_y, y) - harrell_cindex(s, y)));
  }

  const std::vector<double> g{0.0, 0.0};
  const auto y = testing::outcomes({1, 2}, {1, 1});
  const double hand = cox_loss(g, y, RiskSetIndex(y)).loss;
  const double hand_err = std::abs(hand - std::log(2.0) / 2.0);
  return {worst <= 1e-12 && reduction <= 1e-12 && hand_err <= 1e-12,
          "50 instances max error " + fmt("%.3g", worst) + fmt("; zero-censoring |ipcw-harrell| %.3g", reduction) +
              fmt("; hand Cox loss %.12f", hand)};
}

// ---------------------------------------------------------------- 8, 9

struct RecoveryRun {
  double oracle = 0.0;
  double model = 0.0;
  double ibs = 0.0;
  double constant_ibs = 0.0;
};

std::vector<RecoveryRun> recovery_runs;

RecoveryRun recovery(std::uint64_t seed) {
  ClinicalSpecOptions opt;
  opt.n = 2000;
  auto spec = clinical_like_spec(opt, seed);
  spec.seed = derive_seed(seed, "train-cohort");
  const auto train_syn = generate(spec);
  spec.seed = derive_seed(seed, "test-cohort");
  const auto test_syn = generate(spec);

  SurvivalSettings settings;
  settings.em.seed = seed;
  settings.train.seed = seed;
  testing::WarningCapture quiet;
  const auto fit = fit_survival(train_syn.cohort, settings);
  const auto report = evaluate(fit.bundle, test_syn.cohort);

  const auto& y = *test_syn.cohort.outcomes;
  const std::vector<SurvivalCurve> half(y.size(), SurvivalCurve{{-1.0}, {0.5}});
  RecoveryRun run;
  run.oracle = oracle_cindex(test_syn);
  run.model = *report.harrell_cindex;
  run.ibs = report.ibs->value;
  run.constant_ibs = integrated_brier(half, y).value;
  return run;
}

Outcome recovery_criterion() {
  std::vector<double> gaps;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    recovery_runs.push_back(recovery(seed));
    const auto& r = recovery_runs.back();
    gaps.push_back(r.oracle - r.model);
    detail += fmt("oracle %.3f model %.3f; ", r.oracle, r.model);
  }
  std::sort(gaps.begin(), gaps.end());
  const double median = gaps[2];
  return {median <= 0.03, detail + fmt("median gap %.4f", median)};
}

Outcome calibration() {
  if (recovery_runs.empty()) return {false, "recovery runs missing"};
  bool pass = true;
  std::string detail;
  for (const auto& r : recovery_runs) {
    pass = pass && r.ibs < r.constant_ibs && std::abs(r.constant_ibs - 0.25) < 1e-15;
    detail += fmt("%.4f<%.4f; ", r.ibs, r.constant_ibs);
  }
  return {pass, detail + "(Breslow IBS < constant-0.5 IBS)"};
}

// ---------------------------------------------------------------- 10

Outcome defaults_snapshot() {
  const TrainConfig train;
  const SurvivalSettings survival;
  const ImputeEvalConfig impute;
  const std::vector<std::pair<std::string, bool>> checks{
      {"H=90", kDefaultLatentStates == 90 && survival.latent_states == 90 && impute.latent_states == 90},
      {"epochs=100", train.epochs == 100 && kDefaultEpochs == 100},
      {"decay x0.1 after epoch 30", train.lr_decay_epoch == 30 && train.lr_decay_factor == 0.1 &&
                                        train.lr_at(30) == 0.01 && train.lr_at(31) == 0.01 * 0.1},
      {"lr 0.01 / 0.03", train.lr == 0.01 && kLearningRateSingleModality == 0.01 && kLearningRateMultiModal == 0.03},
      {"folds=5", kDefaultFolds == 5},
      {"drop counts 1-4", impute.drop_counts == std::vector<int>{1, 2, 3, 4}},
      {"repeats=5", impute.repeats == 5 && kDefaultImputeRepeats == 5},
      {"memory bank on", survival.memory_bank},
  };
  bool pass = true;
  std::string detail;
  for (const auto& [name, ok] : checks) {
    pass = pass && ok;
    detail += name + (ok ? " ok; " : " WRONG; ");
  }
  return {pass, detail};
}

struct Criterion {
  const char* name;
  double budget_seconds;  // 0 = no time limit
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"AC1 EM monotonicity", 30, em_monotonicity},
      {"AC2 posterior oracle", 5, posterior_oracle},
      {"AC3 imputation experiment", 120, imputation_experiment},
      {"AC4 gradient check", 30, gradient_check},
      {"AC5 memory-bank equivalence", 120, memory_bank_equivalence},
      {"AC6 skip pathology", 0, skip_pathology},
      {"AC7 metric oracles", 0, metric_oracles},
      {"AC8 recovery", 180, recovery_criterion},
      {"AC9 calibration", 0, calibration},
      {"AC10 default constants", 0, defaults_snapshot},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.budget_seconds == 0 || seconds < c.budget_seconds;
    const bool pass = out.pass && in_time;
    failures += !pass;
    std::printf("%s %s [%.1fs%s] %s\n", pass ? "PASS" : "FAIL", c.name, seconds,
                c.budget_seconds == 0 ? ""
                : in_time             ? fmt(" < %.0fs", c.budget_seconds).c_str()
                                      : fmt(" EXCEEDS %.0fs", c.budget_seconds).c_str(),
                out.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
