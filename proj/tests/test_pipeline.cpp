#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mbsurv/pipeline.hpp"
#include "mbsurv/synthgen.hpp"
#include "support.hpp"

using namespace mbsurv;

namespace {

SyntheticCohort clinical(std::size_t n, double missingness, std::uint64_t seed) {
  ClinicalSpecOptions opt;
  opt.n = n;
  opt.missingness = missingness;
  auto spec = clinical_like_spec(opt, seed);
  return generate(spec);
}

SurvivalSettings quick_settings() {
  SurvivalSettings s;
  s.latent_states = 4;
  s.em.max_iters = 30;
  s.train.epochs = 4;
  s.train.lr_decay_epoch = 2;
  s.train.seed = 5;
  return s;
}

std::vector<int> fold_sizes(const std::vector<int>& assignment, int folds) {
  std::vector<int> sizes(folds, 0);
  for (int f : assignment) ++sizes.at(f);
  return sizes;
}

}  // namespace

TEST_CASE("stratified folds have balanced sizes and deaths") {
  const auto y = testing::outcomes({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, {1, 0, 1, 0, 1, 0, 1, 0, 1, 0});
  const auto folds = stratified_folds(y, 5, 3);
  CHECK(fold_sizes(folds, 5) == std::vector<int>(5, 2));
  std::vector<int> deaths(5, 0);
  for (std::size_t i = 0; i < y.size(); ++i) deaths[folds[i]] += y[i].event;
  CHECK(deaths == std::vector<int>(5, 1));
  CHECK(stratified_folds(y, 5, 3) == folds);
  CHECK_THROWS_AS(stratified_folds(y, 1, 3), ValidationError);
  CHECK_THROWS_AS(stratified_folds(y, 11, 3), ValidationError);
}

TEST_CASE("stratified folds property") {
  auto rng = make_rng(1, "folds");
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 5 + rng() % 200;
    const int k = 2 + static_cast<int>(rng() % 4);
    std::vector<SurvivalOutcome> y(n);
    for (auto& o : y) o = {uniform01(rng), uniform01(rng) < 0.4};
    const auto folds = stratified_folds(y, k, rng());
    const auto sizes = fold_sizes(folds, k);
    CHECK(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()) <= 1);
    std::vector<int> deaths(k, 0);
    for (std::size_t i = 0; i < n; ++i) deaths[folds[i]] += y[i].event;
    CHECK(*std::max_element(deaths.begin(), deaths.end()) - *std::min_element(deaths.begin(), deaths.end()) <= 1);
  }
}

TEST_CASE("mean and standard deviation formatting") {
  const std::vector<double> v{0.7, 0.8, 0.75};
  const auto m = *mean_std(v);
  CHECK(m.mean == doctest::Approx(0.75));
  CHECK(m.std == doctest::Approx(0.05));
  CHECK(m.count == 3);
  CHECK(format_mean_std(MeanStd{0.7768, 0.0451, 5}) == "77.68±4.51");
  CHECK(format_mean_std(MeanStd{0.1234, 0.01, 5}, 1.0) == "0.12±0.01");
  CHECK(!mean_std(std::vector<double>{}).has_value());
  CHECK(mean_std(std::vector<double>{0.5})->std == 0.0);
}

TEST_CASE("imputer bundle fills only missing values") {
  const auto syn = clinical(400, 0.3, 2);
  EmConfig em;
  em.max_iters = 40;
  const auto fit = fit_imputer(syn.cohort, 5, em);
  const auto back = ImputerBundle::from_json(json::parse(fit.bundle.to_json().dump()), syn.cohort.schema);
  for (auto mode : {ImputeMode::sample, ImputeMode::map, ImputeMode::expectation}) {
    const auto out = impute_cohort(fit.bundle, syn.cohort, mode, 9);
    CHECK(impute_cohort(back, syn.cohort, mode, 9).records.size() == out.records.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      for (std::size_t k = 0; k < out.schema.size(); ++k) {
        CHECK(out.records[i].values[k].has_value());
        if (syn.cohort.records[i].values[k]) CHECK(*out.records[i].values[k] == *syn.cohort.records[i].values[k]);
      }
    }
    std::ostringstream a, b;
    write_cohort_csv(a, out);
    write_cohort_csv(b, impute_cohort(fit.bundle, syn.cohort, mode, 9));
    CHECK(a.str() == b.str());
  }
  CHECK_THROWS_AS(ImputerBundle::from_json(fit.bundle.to_json(), testing::categorical_schema({2, 3})),
                  SchemaMismatchError);
}

TEST_CASE("survival bundle round trip reproduces predictions") {
  const auto syn = clinical(300, 0.2, 3);
  const auto fit = fit_survival(syn.cohort, quick_settings());
  const auto back = SurvivalBundle::from_json(json::parse(fit.bundle.to_json().dump()), syn.cohort.schema);
  CHECK(predict_scores(back, syn.cohort) == predict_scores(fit.bundle, syn.cohort));
  CHECK(digest(back.to_json()) == digest(fit.bundle.to_json()));
  CHECK_THROWS_AS(SurvivalBundle::from_json(fit.bundle.to_json(), testing::categorical_schema({2})),
                  SchemaMismatchError);

  const auto report = evaluate(fit.bundle, syn.cohort);
  CHECK(report.n == 300);
  CHECK(report.tau_is_default);
  CHECK(report.harrell_cindex.has_value());
  CHECK(report.ipcw_cindex.has_value());
  CHECK(report.ibs.has_value());
  const auto j = report.to_json();
  CHECK(j.at("tau_source") == "largest test death time");
  CHECK(j.at("ibs_grid").at("source") == "unique test times");
}

TEST_CASE("evaluation with the true scores recovers the oracle concordance") {
  const auto syn = clinical(1000, 0.2, 4);
  const auto& y = *syn.cohort.outcomes;
  const auto baseline = breslow_baseline(syn.truth.true_scores, y);
  const auto censoring = kaplan_meier(y, KmTarget::censoring);
  const auto report = evaluate_scores(syn.truth.true_scores, baseline, censoring, y);
  CHECK(*report.harrell_cindex == doctest::Approx(oracle_cindex(syn)).epsilon(1e-12));
  CHECK(std::abs(*report.ipcw_cindex - oracle_cindex(syn)) < 0.05);

  // a tau beyond the follow-up is rejected rather than silently clipped
  double max_time = 0;
  for (const auto& o : y) max_time = std::max(max_time, o.time);
  CHECK_THROWS_AS(evaluate_scores(syn.truth.true_scores, baseline, censoring, y, max_time + 1.0), ValidationError);
}

TEST_CASE("fold artifacts do not depend on held-out rows") {
  const auto syn = clinical(150, 0.2, 5);
  const auto settings = quick_settings();
  const auto base = cross_validate(syn.cohort, 3, settings, 17);

  const auto folds = stratified_folds(*syn.cohort.outcomes, 3, 17);
  auto perturbed = syn.cohort;
  for (std::size_t i = 0; i < perturbed.size(); ++i) {
    if (folds[i] != 0) continue;
    for (std::size_t k = 2; k < perturbed.schema.size(); ++k) perturbed.records[i].values[k].reset();
  }
  const auto again = cross_validate(perturbed, 3, settings, 17);
  CHECK(again.fold_reports[0].artifact_digest == base.fold_reports[0].artifact_digest);
  CHECK(again.fold_reports[1].artifact_digest != base.fold_reports[1].artifact_digest);
  CHECK(again.fold_reports[2].artifact_digest != base.fold_reports[2].artifact_digest);

  const auto repeat = cross_validate(syn.cohort, 3, settings, 17);
  CHECK(repeat.to_json() == base.to_json());
  CHECK(base.to_json().at("summary").dump().find("±") != std::string::npos);
  CHECK(base.to_csv().find("fold") != std::string::npos);
}

TEST_CASE("folds without test deaths are flagged and left out of the C-index summary") {
  const auto syn = clinical(60, 0.1, 6);
  auto cohort = syn.cohort;
  // keep only two deaths
  int kept = 0;
  for (auto& o : *cohort.outcomes)
    if (o.event && ++kept > 2) o.event = false;
  testing::WarningCapture capture;
  const auto report = cross_validate(cohort, 5, quick_settings(), 3);
  std::size_t flagged = 0;
  for (const auto& f : report.fold_reports) flagged += f.flagged;
  CHECK(flagged == 3);
  CHECK(report.harrell_cindex->count <= 2);
  bool warned = false;
  for (const auto& m : capture.messages) warned = warned || m.find("no test deaths") != std::string::npos;
  CHECK(warned);
}

TEST_CASE("imputation experiment bookkeeping") {
  const auto train = clinical(500, 0.2, 7);
  ClinicalSpecOptions opt;
  opt.n = 100;
  opt.missingness = 0.0;
  auto test_spec = clinical_like_spec(opt, 7);
  test_spec.seed = 70;
  const auto test = generate(test_spec);

  ImputeEvalConfig cfg;
  cfg.drop_counts = {0, 2};
  cfg.repeats = 2;
  cfg.latent_states = 5;
  cfg.em.max_iters = 50;
  const auto report = run_impute_eval(train.cohort, test.cohort, cfg);
  for (const std::string method : {"latent_class_expectation", "latent_class_map", "mean"}) {
    const auto& zero = report.row(method, 0);
    CHECK(*zero.accuracy == 1.0);
    CHECK(*zero.nrmse == 0.0);
    const auto& two = report.row(method, 2);
    CHECK(two.accuracy_by_repeat.size() == 2);
  }
  CHECK(report.to_csv().find("latent_class_map") != std::string::npos);
  CHECK(run_impute_eval(train.cohort, test.cohort, cfg).to_json() == report.to_json());

  cfg.drop_counts = {5};  // age and sex leave four maskable features
  CHECK_THROWS_AS(run_impute_eval(train.cohort, test.cohort, cfg), ValidationError);
  cfg.drop_counts = {1};
  CHECK_THROWS_AS(run_impute_eval(train.cohort, train.cohort, cfg), ValidationError);
  cfg.repeats = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("latent-class imputation beats the mean on class-structured data") {
  const auto train = clinical(1500, 0.2, 8);
  ClinicalSpecOptions opt;
  opt.n = 300;
  opt.missingness = 0.0;
  auto test_spec = clinical_like_spec(opt, 8);
  test_spec.seed = 80;
  ImputeEvalConfig cfg;
  cfg.drop_counts = {2, 4};
  cfg.repeats = 2;
  cfg.latent_states = 20;
  const auto report = run_impute_eval(train.cohort, generate(test_spec).cohort, cfg);
  for (int d : cfg.drop_counts) {
    CHECK(*report.row("latent_class_expectation", d).accuracy > *report.row("mean", d).accuracy);
    CHECK(*report.row("latent_class_expectation", d).nrmse < *report.row("mean", d).nrmse);
  }
}
