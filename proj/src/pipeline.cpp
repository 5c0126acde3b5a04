#include "mbsurv/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "mbsurv/diagnostics.hpp"
#include "mbsurv/errors.hpp"
#include "mbsurv/rng.hpp"

namespace mbsurv {

namespace {

json curve_to_json(const SurvivalCurve& c) { return {{"times", c.times}, {"probabilities", c.probabilities}}; }

SurvivalCurve curve_from_json(const json& j) {
  SurvivalCurve c{j.at("times").get<std::vector<double>>(), j.at("probabilities").get<std::vector<double>>()};
  c.validate();
  return c;
}

void expect_format(const json& j, const char* format) {
  if (!j.is_object() || j.value("format", std::string{}) != format)
    throw ValidationError(std::string("expected a '") + format + "' document");
}

std::string csv_number(const std::optional<double>& v) { return v ? format_double(*v) : std::string{}; }

}  // namespace

std::string digest(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------- imputer artifacts

json ImputerBundle::to_json() const {
  return {{"format", "imputer_bundle"}, {"binning", binning.to_json()}, {"model", model.to_json()}};
}

ImputerBundle ImputerBundle::from_json(const json& j, const FeatureSchema& schema) {
  expect_format(j, "imputer_bundle");
  ImputerBundle b{BinningSpec::from_json(j.at("binning")), LatentClassModel::from_json(j.at("model"))};
  b.model.check_schema(schema);
  if (b.binning.entries.size() != schema.size()) throw SchemaMismatchError("binning does not match the schema");
  return b;
}

ImputerFit fit_imputer(const RawCohort& training, int latent_states, const EmConfig& config) {
  validate(training);
  ImputerFit fit;
  fit.bundle.binning = fit_binning_spec(training);
  const Cohort cohort = discretize(training, fit.bundle.binning);
  fit.em = fit_em(cohort, latent_states, config);
  fit.bundle.model = fit.em.model;
  return fit;
}

RawCohort impute_cohort(const ImputerBundle& bundle, const RawCohort& cohort, ImputeMode mode,
                        std::uint64_t seed) {
  bundle.model.check_schema(cohort.schema);
  const Cohort discrete = discretize(cohort, bundle.binning);
  auto rng = make_rng(seed, "impute");
  RawCohort out = cohort;
  for (std::size_t n = 0; n < cohort.size(); ++n) {
    const auto& record = discrete.records[n];
    if (record.complete()) continue;
    RawRecord filled;
    switch (mode) {
      case ImputeMode::sample:
        filled = to_raw(impute_sample(bundle.model, record, rng), cohort.schema, bundle.binning);
        break;
      case ImputeMode::map:
        filled = to_raw(impute_map(bundle.model, record), cohort.schema, bundle.binning);
        break;
      case ImputeMode::expectation:
        filled = impute_expectation(bundle.model, record, cohort.schema, bundle.binning).values;
        break;
    }
    auto& values = out.records[n].values;
    for (std::size_t k = 0; k < values.size(); ++k)
      if (!values[k]) values[k] = filled.values[k];
  }
  return out;
}

// ---------------------------------------------------------------- survival artifacts

json SurvivalBundle::to_json() const {
  return {{"format", "survival_model"},
          {"schema_fingerprint", schema_fingerprint},
          {"binning", binning.to_json()},
          {"imputer", imputer.to_json()},
          {"encoder", encoder.to_json()},
          {"model", model.to_json()},
          {"baseline", baseline.to_json()},
          {"censoring", curve_to_json(censoring)}};
}

SurvivalBundle SurvivalBundle::from_json(const json& j, const FeatureSchema& schema) {
  expect_format(j, "survival_model");
  SurvivalBundle b;
  b.schema_fingerprint = j.at("schema_fingerprint").get<std::string>();
  if (b.schema_fingerprint != schema.fingerprint())
    throw SchemaMismatchError("survival model was fit on schema " + b.schema_fingerprint + ", cohort schema is " +
                              schema.fingerprint());
  b.binning = BinningSpec::from_json(j.at("binning"));
  b.imputer = LatentClassModel::from_json(j.at("imputer"));
  b.imputer.check_schema(schema);
  b.encoder = FeatureEncoder::from_json(j.at("encoder"), schema);
  b.model = RiskModel::from_json(j.at("model"));
  if (b.model.input_width() != b.encoder.width())
    throw ValidationError("survival model: encoder width does not match the network input");
  b.baseline = BaselineHazard::from_json(j.at("baseline"));
  b.censoring = curve_from_json(j.at("censoring"));
  return b;
}

SurvivalFit fit_survival(const RawCohort& training, const SurvivalSettings& settings) {
  validate(training);
  SurvivalFit fit;
  auto& b = fit.bundle;
  b.schema_fingerprint = training.schema.fingerprint();
  b.binning = fit_binning_spec(training);
  const Cohort cohort = discretize(training, b.binning);
  const auto outcomes = cohort.outcome_span();
  fit.em = fit_em(cohort, settings.latent_states, settings.em);
  b.imputer = fit.em.model;
  b.encoder = FeatureEncoder::fit(cohort, b.binning);
  RiskModel initial(b.encoder.width(), settings.architecture, derive_seed(settings.train.seed, "risk-model-init"));
  fit.training = settings.memory_bank ? train(cohort, b.imputer, b.encoder, std::move(initial), settings.train)
                                      : train_without_bank(cohort, b.imputer, b.encoder, std::move(initial),
                                                           settings.train);
  b.model = fit.training.model;
  const CohortPosterior posterior(b.imputer, cohort);
  const Eigen::VectorXd scores = forward(b.model, b.encoder.encode(posterior.map_records()));
  b.baseline = breslow_baseline(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())),
                                outcomes);
  b.censoring = kaplan_meier(outcomes, KmTarget::censoring);
  return fit;
}

std::vector<double> predict_scores(const SurvivalBundle& bundle, const RawCohort& cohort) {
  if (cohort.schema.fingerprint() != bundle.schema_fingerprint)
    throw SchemaMismatchError("cohort schema does not match the survival model");
  const Cohort discrete = discretize(cohort, bundle.binning);
  const CohortPosterior posterior(bundle.imputer, discrete);
  const Eigen::VectorXd scores = forward(bundle.model, bundle.encoder.encode(posterior.map_records()));
  return {scores.data(), scores.data() + scores.size()};
}

json EvaluationReport::to_json() const {
  json j{{"n", n}, {"deaths", deaths}};
  j["ipcw_cindex"] = ipcw_cindex ? json(*ipcw_cindex) : json(nullptr);
  j["tau"] = tau;
  j["tau_source"] = tau_is_default ? "largest test death time" : "user";
  j["harrell_cindex"] = harrell_cindex ? json(*harrell_cindex) : json(nullptr);
  if (ibs) {
    j["ibs"] = ibs->value;
    j["ibs_grid"] = {{"source", "unique test times"},
                     {"t_min", ibs->t_min},
                     {"t_max", ibs->t_max},
                     {"points", ibs->grid.size()},
                     {"excluded_points", ibs->excluded_points},
                     {"times", ibs->grid},
                     {"brier", ibs->scores}};
  } else {
    j["ibs"] = nullptr;
  }
  j["notes"] = notes;
  return j;
}

EvaluationReport evaluate_scores(std::span<const double> scores, const BaselineHazard& baseline,
                                 const SurvivalCurve& censoring, std::span<const SurvivalOutcome> test_outcomes,
                                 std::optional<double> tau, const BrierOptions& brier) {
  if (scores.size() != test_outcomes.size()) throw ValidationError("evaluate: scores and outcomes differ in length");
  EvaluationReport r;
  r.n = scores.size();
  r.deaths = static_cast<std::size_t>(
      std::count_if(test_outcomes.begin(), test_outcomes.end(), [](const SurvivalOutcome& o) { return o.event; }));
  try {
    r.tau_is_default = !tau.has_value();
    r.tau = tau ? *tau : default_tau(test_outcomes);
    r.ipcw_cindex = ipcw_cindex(scores, censoring, test_outcomes, r.tau);
  } catch (const UndefinedMetricError& e) {
    r.notes.emplace_back(e.what());
  }
  try {
    r.harrell_cindex = harrell_cindex(scores, test_outcomes);
  } catch (const UndefinedMetricError& e) {
    r.notes.emplace_back(e.what());
  }
  try {
    std::vector<SurvivalCurve> curves;
    curves.reserve(scores.size());
    for (double s : scores) curves.push_back(baseline.survival(s));
    r.ibs = integrated_brier(curves, test_outcomes, brier);
  } catch (const UndefinedMetricError& e) {
    r.notes.emplace_back(e.what());
  }
  return r;
}

EvaluationReport evaluate(const SurvivalBundle& bundle, const RawCohort& test, std::optional<double> tau,
                          bool graf_weighting) {
  const auto scores = predict_scores(bundle, test);
  BrierOptions brier;
  if (graf_weighting) brier.graf_censoring = &bundle.censoring;
  return evaluate_scores(scores, bundle.baseline, bundle.censoring, test.outcome_span(), tau, brier);
}

// ---------------------------------------------------------------- cross-validation

std::vector<int> stratified_folds(std::span<const SurvivalOutcome> outcomes, int folds, std::uint64_t seed) {
  if (folds < 2) throw ValidationError("folds must be >= 2");
  if (static_cast<std::size_t>(folds) > outcomes.size())
    throw ValidationError("folds (" + std::to_string(folds) + ") exceed the number of patients (" +
                          std::to_string(outcomes.size()) + ")");
  std::vector<std::size_t> deaths, censored;
  for (std::size_t i = 0; i < outcomes.size(); ++i) (outcomes[i].event ? deaths : censored).push_back(i);
  auto rng = make_rng(seed, "fold-split");
  auto shuffle = [&](std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
  };
  shuffle(deaths);
  shuffle(censored);
  std::vector<int> assignment(outcomes.size());
  std::size_t position = 0;
  for (const auto* group : {&deaths, &censored})
    for (auto i : *group) assignment[i] = static_cast<int>(position++ % static_cast<std::size_t>(folds));
  return assignment;
}

std::optional<MeanStd> mean_std(std::span<const double> values) {
  if (values.empty()) return std::nullopt;
  MeanStd m;
  m.count = values.size();
  m.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(m.count);
  if (m.count > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(m.count - 1));
  }
  return m;
}

std::string format_mean_std(const MeanStd& value, double scale) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", value.mean * scale, value.std * scale);
  return buf;
}

json CrossValidationReport::to_json() const {
  json fs = json::array();
  for (const auto& f : fold_reports) {
    json j = f.metrics.to_json();
    j.erase("ibs_grid");
    j["fold"] = f.fold;
    j["train_size"] = f.train_size;
    j["test_size"] = f.test_size;
    j["test_deaths"] = f.test_deaths;
    j["flagged"] = f.flagged;
    j["artifact_digest"] = f.artifact_digest;
    fs.push_back(std::move(j));
  }
  auto summary = [](const std::optional<MeanStd>& m, double scale) -> json {
    if (!m) return nullptr;
    return {{"mean", m->mean}, {"std", m->std}, {"count", m->count}, {"formatted", format_mean_std(*m, scale)}};
  };
  return {{"folds", folds},
          {"seed", seed},
          {"fold_reports", fs},
          {"summary",
           {{"ipcw_cindex", summary(ipcw_cindex, 100.0)},
            {"harrell_cindex", summary(harrell_cindex, 100.0)},
            {"ibs", summary(ibs, 1.0)}}}};
}

std::string CrossValidationReport::to_csv() const {
  std::ostringstream out;
  out << "fold,train_size,test_size,test_deaths,flagged,ipcw_cindex,harrell_cindex,ibs\n";
  for (const auto& f : fold_reports)
    out << f.fold << ',' << f.train_size << ',' << f.test_size << ',' << f.test_deaths << ','
        << (f.flagged ? 1 : 0) << ',' << csv_number(f.metrics.ipcw_cindex) << ','
        << csv_number(f.metrics.harrell_cindex) << ','
        << csv_number(f.metrics.ibs ? std::optional<double>(f.metrics.ibs->value) : std::nullopt) << '\n';
  return out.str();
}

CrossValidationReport cross_validate(const RawCohort& cohort, int folds, const SurvivalSettings& settings,
                                     std::uint64_t seed) {
  validate(cohort);
  const auto outcomes = cohort.outcome_span();
  const auto assignment = stratified_folds(outcomes, folds, seed);
  CrossValidationReport report;
  report.folds = folds;
  report.seed = seed;
  std::vector<double> ipcw, harrell, ibs;
  for (int f = 0; f < folds; ++f) {
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t i = 0; i < assignment.size(); ++i) (assignment[i] == f ? test_rows : train_rows).push_back(i);
    const RawCohort train_part = cohort.subset(train_rows);
    const RawCohort test_part = cohort.subset(test_rows);
    const SurvivalFit fit = fit_survival(train_part, settings);

    FoldReport fr;
    fr.fold = f;
    fr.train_size = train_rows.size();
    fr.test_size = test_rows.size();
    fr.artifact_digest = digest(fit.bundle.to_json());
    fr.metrics = evaluate(fit.bundle, test_part);
    fr.test_deaths = fr.metrics.deaths;
    fr.flagged = fr.test_deaths == 0;
    if (fr.flagged) {
      warn("fold " + std::to_string(f) + " has no test deaths; excluded from the C-index summary");
    } else {
      if (fr.metrics.ipcw_cindex) ipcw.push_back(*fr.metrics.ipcw_cindex);
      if (fr.metrics.harrell_cindex) harrell.push_back(*fr.metrics.harrell_cindex);
    }
    if (fr.metrics.ibs) ibs.push_back(fr.metrics.ibs->value);
    report.fold_reports.push_back(std::move(fr));
  }
  report.ipcw_cindex = mean_std(ipcw);
  report.harrell_cindex = mean_std(harrell);
  report.ibs = mean_std(ibs);
  return report;
}

// ---------------------------------------------------------------- imputation experiment

void ImputeEvalConfig::validate() const {
  if (repeats < 1) throw ValidationError("repeats must be >= 1");
  if (drop_counts.empty()) throw ValidationError("no drop counts given");
  for (int d : drop_counts)
    if (d < 0) throw ValidationError("drop counts must be >= 0");
}

const ImputeEvalRow& ImputeEvalReport::row(const std::string& method, int drop_count) const {
  for (const auto& r : rows)
    if (r.method == method && r.drop_count == drop_count) return r;
  throw ValidationError("no imputation result for " + method + " at drop count " + std::to_string(drop_count));
}

json ImputeEvalReport::to_json() const {
  json rs = json::array();
  for (const auto& r : rows)
    rs.push_back({{"method", r.method},
                  {"drop_count", r.drop_count},
                  {"accuracy", r.accuracy ? json(*r.accuracy) : json(nullptr)},
                  {"nrmse", r.nrmse ? json(*r.nrmse) : json(nullptr)},
                  {"accuracy_by_repeat", r.accuracy_by_repeat},
                  {"nrmse_by_repeat", r.nrmse_by_repeat}});
  return {{"train_size", train_size}, {"test_size", test_size}, {"rows", rs}};
}

std::string ImputeEvalReport::to_csv() const {
  std::ostringstream out;
  out << "method,drop_count,accuracy,nrmse\n";
  for (const auto& r : rows)
    out << r.method << ',' << r.drop_count << ',' << csv_number(r.accuracy) << ',' << csv_number(r.nrmse) << '\n';
  return out.str();
}

ImputeEvalReport run_impute_eval(const RawCohort& training, const RawCohort& test, const ImputeEvalConfig& config) {
  config.validate();
  validate(training);
  validate(test);
  const auto& schema = training.schema;
  if (test.schema.fingerprint() != schema.fingerprint())
    throw SchemaMismatchError("training and test cohorts use different schemas");
  for (const auto& r : test.records)
    for (const auto& v : r.values)
      if (!v) throw ValidationError("imputation evaluation needs complete test records ('" + r.patient_id + "')");
  const auto maskable = schema.maskable();
  for (int d : config.drop_counts)
    if (static_cast<std::size_t>(d) > maskable.size())
      throw ValidationError("drop count " + std::to_string(d) + " exceeds the " + std::to_string(maskable.size()) +
                            " maskable features");

  const BinningSpec binning = fit_binning_spec(training);
  const Cohort train_cohort = discretize(training, binning);
  const LatentClassModel model = fit_em(train_cohort, config.latent_states, config.em).model;
  const MeanImputer mean = MeanImputer::fit(train_cohort, binning);
  const Cohort test_cohort = discretize(test, binning);

  const std::size_t k_count = schema.size();
  std::vector<double> range(k_count, 0.0);
  for (std::size_t k = 0; k < k_count; ++k) {
    if (!schema[k].is_continuous()) continue;
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& r : test.records) {
      lo = std::min(lo, *r.values[k]);
      hi = std::max(hi, *r.values[k]);
    }
    range[k] = hi - lo;
    if (!(range[k] > 0.0)) warn("feature '" + schema[k].name + "' is constant in the test set; NRMSE skips it");
  }

  const std::vector<std::string> methods = {"latent_class_expectation", "latent_class_map", "mean"};
  struct Tally {
    std::size_t hits = 0, categorical = 0;
    std::vector<double> sse;
    std::vector<std::size_t> count;
  };

  ImputeEvalReport report;
  report.train_size = training.size();
  report.test_size = test.size();
  const std::uint64_t mask_root = derive_seed(config.seed, "impute-eval-mask");
  for (int d : config.drop_counts) {
    std::vector<ImputeEvalRow> rows(methods.size());
    for (std::size_t m = 0; m < methods.size(); ++m) {
      rows[m].method = methods[m];
      rows[m].drop_count = d;
    }
    if (d == 0) {
      for (auto& r : rows) {
        r.accuracy = 1.0;
        r.nrmse = 0.0;
      }
      report.rows.insert(report.rows.end(), rows.begin(), rows.end());
      continue;
    }
    for (int rep = 0; rep < config.repeats; ++rep) {
      auto rng = make_rng(mask_root, "drop" + std::to_string(d) + "-repeat" + std::to_string(rep));
      std::vector<Tally> tallies(methods.size(), Tally{0, 0, std::vector<double>(k_count, 0.0),
                                                       std::vector<std::size_t>(k_count, 0)});
      std::vector<std::size_t> pool;
      for (std::size_t n = 0; n < test.size(); ++n) {
        pool = maskable;
        for (int i = 0; i < d; ++i) {
          const std::size_t left = pool.size() - static_cast<std::size_t>(i);
          std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(i) + rng() % left]);
        }
        ClinicalRecord masked = test_cohort.records[n];
        for (int i = 0; i < d; ++i) masked.states[pool[static_cast<std::size_t>(i)]].reset();

        const auto expectation = impute_expectation(model, masked, schema, binning);
        const auto map_raw = to_raw(impute_map(model, masked), schema, binning);
        for (int i = 0; i < d; ++i) {
          const std::size_t k = pool[static_cast<std::size_t>(i)];
          const double truth = *test.records[n].values[k];
          const double guesses[] = {*expectation.values.values[k], *map_raw.values[k], mean.fill_value(k)};
          for (std::size_t m = 0; m < methods.size(); ++m) {
            auto& t = tallies[m];
            if (schema[k].is_continuous()) {
              t.sse[k] += (guesses[m] - truth) * (guesses[m] - truth);
              ++t.count[k];
            } else {
              ++t.categorical;
              t.hits += static_cast<int>(guesses[m]) == static_cast<int>(truth);
            }
          }
        }
      }
      for (std::size_t m = 0; m < methods.size(); ++m) {
        const auto& t = tallies[m];
        if (t.categorical > 0)
          rows[m].accuracy_by_repeat.push_back(static_cast<double>(t.hits) / static_cast<double>(t.categorical));
        double total = 0.0;
        std::size_t features = 0;
        for (std::size_t k = 0; k < k_count; ++k)
          if (t.count[k] > 0 && range[k] > 0.0) {
            total += std::sqrt(t.sse[k] / static_cast<double>(t.count[k])) / range[k];
            ++features;
          }
        if (features > 0) rows[m].nrmse_by_repeat.push_back(total / static_cast<double>(features));
      }
    }
    for (auto& r : rows) {
      if (auto m = mean_std(r.accuracy_by_repeat)) r.accuracy = m->mean;
      if (auto m = mean_std(r.nrmse_by_repeat)) r.nrmse = m->mean;
    }
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

}  // namespace mbsurv
