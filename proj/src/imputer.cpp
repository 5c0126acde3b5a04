#include "mbsurv/imputer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mbsurv/diagnostics.hpp"
#include "mbsurv/errors.hpp"

namespace mbsurv {

namespace {

constexpr double kSumTolerance = 1e-12;

void normalize(std::span<double> v) {
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  for (auto& x : v) x /= total;
}

void check_distribution(std::span<const double> p, const std::string& what) {
  double total = 0.0;
  for (double x : p) {
    if (!(x > 0.0) || !std::isfinite(x))
      throw ValidationError(what + ": probabilities must be strictly positive and finite");
    total += x;
  }
  if (std::abs(total - 1.0) > kSumTolerance)
    throw ValidationError(what + ": probabilities sum to " + format_double(total) + ", not 1");
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void check_record(const LatentClassModel& model, const ClinicalRecord& record) {
  if (record.states.size() != model.feature_count())
    throw ValidationError("patient '" + record.patient_id + "': record has " +
                          std::to_string(record.states.size()) + " features, model expects " +
                          std::to_string(model.feature_count()));
  for (std::size_t k = 0; k < record.states.size(); ++k)
    if (record.states[k] &&
        (*record.states[k] < 0 || *record.states[k] >= model.emission(k).categories))
      throw ValidationError("patient '" + record.patient_id + "': state out of range for feature " +
                            std::to_string(k));
}

/// log p(h) + sum over observed features of log p(x_k | h), for every h.
class LogTables {
 public:
  explicit LogTables(const LatentClassModel& model) : states_(model.latent_states()) {
    log_prior_.reserve(model.prior().size());
    for (double p : model.prior()) log_prior_.push_back(std::log(p));
    for (const auto& t : model.emissions()) {
      std::vector<double> lt(t.probs.size());
      std::transform(t.probs.begin(), t.probs.end(), lt.begin(), [](double p) { return std::log(p); });
      log_emissions_.push_back(std::move(lt));
      categories_.push_back(t.categories);
    }
  }

  /// Fills `out` (size H) with the unnormalized log posterior over h and
  /// returns its log-sum-exp.
  double joint(const ClinicalRecord& record, std::span<double> out) const {
    std::copy(log_prior_.begin(), log_prior_.end(), out.begin());
    for (std::size_t k = 0; k < record.states.size(); ++k) {
      if (!record.states[k]) continue;
      const auto c = static_cast<std::size_t>(*record.states[k]);
      const auto stride = static_cast<std::size_t>(categories_[k]);
      const double* col = log_emissions_[k].data() + c;
      for (int h = 0; h < states_; ++h) out[h] += col[h * stride];
    }
    const double m = *std::max_element(out.begin(), out.end());
    double s = 0.0;
    for (int h = 0; h < states_; ++h) s += std::exp(out[h] - m);
    return m + std::log(s);
  }

 private:
  int states_;
  std::vector<double> log_prior_;
  std::vector<std::vector<double>> log_emissions_;
  std::vector<int> categories_;
};

/// Posterior weights p(h | x_o) for one record.
std::vector<double> state_posterior(const LogTables& tables, const ClinicalRecord& record, int states) {
  std::vector<double> w(static_cast<std::size_t>(states));
  const double lse = tables.joint(record, w);
  for (auto& x : w) x = std::exp(x - lse);
  normalize(w);
  return w;
}

}  // namespace

// ---------------------------------------------------------------- model

LatentClassModel::LatentClassModel(std::vector<double> prior, std::vector<EmissionTable> emissions,
                                   std::string schema_fingerprint)
    : prior_(std::move(prior)), emissions_(std::move(emissions)),
      fingerprint_(std::move(schema_fingerprint)) {
  if (prior_.empty()) throw ValidationError("latent class model needs at least one state");
  check_distribution(prior_, "prior");
  const int h_count = latent_states();
  for (std::size_t k = 0; k < emissions_.size(); ++k) {
    const auto& t = emissions_[k];
    if (t.states != h_count || t.categories < 1 ||
        t.probs.size() != static_cast<std::size_t>(t.states) * t.categories)
      throw ValidationError("emission table " + std::to_string(k) + " has inconsistent shape");
    for (int h = 0; h < h_count; ++h)
      check_distribution(t.row(h), "emission table " + std::to_string(k) + " state " + std::to_string(h));
  }
}

void LatentClassModel::check_schema(const FeatureSchema& schema) const {
  if (schema.fingerprint() != fingerprint_)
    throw SchemaMismatchError("latent class model was fit on schema " + fingerprint_ +
                              ", cohort schema is " + schema.fingerprint());
}

json LatentClassModel::to_json() const {
  json tables = json::array();
  for (const auto& t : emissions_) {
    json rows = json::array();
    for (int h = 0; h < t.states; ++h) {
      auto r = t.row(h);
      rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    tables.push_back(std::move(rows));
  }
  return {{"format", "latent_class_model"},
          {"schema_fingerprint", fingerprint_},
          {"latent_states", latent_states()},
          {"prior", prior_},
          {"emissions", std::move(tables)}};
}

LatentClassModel LatentClassModel::from_json(const json& j) {
  try {
    if (j.value("format", std::string{}) != "latent_class_model")
      throw ValidationError("not a latent class model file");
    auto prior = j.at("prior").get<std::vector<double>>();
    if (j.at("latent_states").get<std::size_t>() != prior.size())
      throw ValidationError("latent_states does not match prior length");
    std::vector<EmissionTable> tables;
    for (const auto& jt : j.at("emissions")) {
      EmissionTable t;
      t.states = static_cast<int>(jt.size());
      for (const auto& row : jt) {
        auto r = row.get<std::vector<double>>();
        if (t.categories == 0) t.categories = static_cast<int>(r.size());
        if (static_cast<int>(r.size()) != t.categories)
          throw ValidationError("ragged emission table");
        t.probs.insert(t.probs.end(), r.begin(), r.end());
      }
      tables.push_back(std::move(t));
    }
    return LatentClassModel(std::move(prior), std::move(tables),
                            j.at("schema_fingerprint").get<std::string>());
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed latent class model: ") + e.what());
  }
}

// ---------------------------------------------------------------- EM

double log_likelihood(const LatentClassModel& model, const Cohort& cohort) {
  const LogTables tables(model);
  std::vector<double> buf(static_cast<std::size_t>(model.latent_states()));
  double total = 0.0;
  for (const auto& r : cohort.records) {
    check_record(model, r);
    total += tables.joint(r, buf);
  }
  return total;
}

Responsibilities e_step(const LatentClassModel& model, const Cohort& cohort) {
  const int h_count = model.latent_states();
  const LogTables tables(model);
  Responsibilities out;
  out.states = h_count;
  out.q.resize(cohort.size() * static_cast<std::size_t>(h_count));
  for (std::size_t n = 0; n < cohort.size(); ++n) {
    const auto& r = cohort.records[n];
    check_record(model, r);
    std::span<double> row(out.q.data() + n * h_count, static_cast<std::size_t>(h_count));
    const double lse = tables.joint(r, row);
    out.log_likelihood += lse;
    for (auto& x : row) x = std::exp(x - lse);
    normalize(row);
  }
  return out;
}

LatentClassModel m_step(const LatentClassModel& model, const Cohort& cohort,
                        const Responsibilities& responsibilities, double smoothing) {
  const int h_count = model.latent_states();
  if (responsibilities.states != h_count || responsibilities.records() != cohort.size())
    throw ValidationError("responsibilities do not align with cohort/model");
  if (smoothing < 0.0) throw ValidationError("smoothing must be nonnegative");

  const std::size_t features = model.feature_count();
  std::vector<std::vector<double>> counts(features);
  std::vector<std::vector<double>> missing_mass(features, std::vector<double>(h_count, 0.0));
  for (std::size_t k = 0; k < features; ++k)
    counts[k].assign(model.emission(k).probs.size(), smoothing);
  std::vector<double> prior_counts(static_cast<std::size_t>(h_count), smoothing);

  for (std::size_t n = 0; n < cohort.size(); ++n) {
    const auto q = responsibilities.row(n);
    const auto& r = cohort.records[n];
    for (int h = 0; h < h_count; ++h) prior_counts[h] += q[h];
    for (std::size_t k = 0; k < features; ++k) {
      if (r.states[k]) {
        const auto stride = static_cast<std::size_t>(model.emission(k).categories);
        double* col = counts[k].data() + *r.states[k];
        for (int h = 0; h < h_count; ++h) col[h * stride] += q[h];
      } else {
        auto& mass = missing_mass[k];
        for (int h = 0; h < h_count; ++h) mass[h] += q[h];
      }
    }
  }

  std::vector<EmissionTable> tables;
  tables.reserve(features);
  for (std::size_t k = 0; k < features; ++k) {
    const auto& old = model.emission(k);
    EmissionTable t{old.states, old.categories, std::move(counts[k])};
    for (int h = 0; h < h_count; ++h) {
      std::span<double> row(t.probs.data() + static_cast<std::size_t>(h) * t.categories,
                            static_cast<std::size_t>(t.categories));
      // q(x_i = c, h | x) = q(h | x) p_old(c | h) for a missing x_i
      for (int c = 0; c < t.categories; ++c) row[c] += missing_mass[k][h] * old(h, c);
      normalize(row);
    }
    tables.push_back(std::move(t));
  }
  normalize(prior_counts);
  return LatentClassModel(std::move(prior_counts), std::move(tables), model.schema_fingerprint());
}

LatentClassModel initial_model(const Cohort& cohort, int latent_states, const EmConfig& config) {
  if (latent_states < 1) throw ValidationError("number of latent states must be >= 1");
  const auto& schema = cohort.schema;
  auto rng = make_rng(config.seed, "em-init");
  std::uniform_real_distribution<double> noise(0.9, 1.1);
  // a floor keeps the start strictly positive even when smoothing is zero
  const double pseudo = std::max(config.smoothing, 1e-12);

  std::vector<EmissionTable> tables;
  for (std::size_t k = 0; k < schema.size(); ++k) {
    const int cats = schema.cardinality(k);
    std::vector<double> marginal(static_cast<std::size_t>(cats), pseudo);
    for (const auto& r : cohort.records)
      if (r.states.at(k)) marginal.at(static_cast<std::size_t>(*r.states[k])) += 1.0;
    normalize(marginal);

    EmissionTable t{latent_states, cats, {}};
    t.probs.reserve(static_cast<std::size_t>(latent_states) * cats);
    for (int h = 0; h < latent_states; ++h) {
      std::vector<double> row = marginal;
      if (latent_states > 1)
        for (auto& p : row) p *= noise(rng);
      normalize(row);
      t.probs.insert(t.probs.end(), row.begin(), row.end());
    }
    tables.push_back(std::move(t));
  }
  std::vector<double> prior(static_cast<std::size_t>(latent_states), 1.0 / latent_states);
  normalize(prior);
  return LatentClassModel(std::move(prior), std::move(tables), schema.fingerprint());
}

EmFit fit_em(const Cohort& cohort, int latent_states, const EmConfig& config) {
  if (cohort.size() == 0) throw ValidationError("cannot fit a latent class model on an empty cohort");
  if (config.max_iters < 0) throw ValidationError("max_iters must be nonnegative");
  validate(cohort);
  if (static_cast<std::size_t>(latent_states) > cohort.size())
    warn("latent states (" + std::to_string(latent_states) + ") exceed record count (" +
         std::to_string(cohort.size()) + ")");

  EmFit fit;
  fit.model = initial_model(cohort, latent_states, config);
  auto resp = e_step(fit.model, cohort);
  fit.log_likelihood_trace.push_back(resp.log_likelihood);
  for (int it = 1; it <= config.max_iters; ++it) {
    fit.model = m_step(fit.model, cohort, resp, config.smoothing);
    const double previous = resp.log_likelihood;
    resp = e_step(fit.model, cohort);
    fit.log_likelihood_trace.push_back(resp.log_likelihood);
    fit.iterations = it;
    const double scale = std::max(std::abs(previous), std::numeric_limits<double>::min());
    if (std::abs(resp.log_likelihood - previous) / scale < config.rel_tol) {
      fit.converged = true;
      break;
    }
  }
  return fit;
}

// ---------------------------------------------------------------- posterior

MissingPosterior::MissingPosterior(std::vector<double> weights, std::vector<std::size_t> features,
                                   std::vector<EmissionTable> tables)
    : weights_(std::move(weights)), features_(std::move(features)), tables_(std::move(tables)) {
  if (features_.size() != tables_.size())
    throw ValidationError("missing posterior: features and tables differ in length");
}

std::vector<double> MissingPosterior::marginal(std::size_t j) const {
  const auto& t = tables_.at(j);
  std::vector<double> out(static_cast<std::size_t>(t.categories), 0.0);
  for (int h = 0; h < t.states; ++h) {
    const double w = weights_[h];
    const auto row = t.row(h);
    for (int c = 0; c < t.categories; ++c) out[c] += w * row[c];
  }
  normalize(out);
  return out;
}

double MissingPosterior::probability(std::span<const int> completion) const {
  if (completion.size() != features_.size())
    throw ValidationError("completion length does not match missing features");
  double total = 0.0;
  for (std::size_t h = 0; h < weights_.size(); ++h) {
    double p = weights_[h];
    for (std::size_t j = 0; j < tables_.size(); ++j) p *= tables_[j](static_cast<int>(h), completion[j]);
    total += p;
  }
  return total;
}

std::vector<int> MissingPosterior::sample(Rng& rng) const {
  std::vector<int> out;
  if (empty()) return out;
  const auto h = static_cast<int>(sample_categorical(weights_, rng));
  for (const auto& t : tables_) out.push_back(static_cast<int>(sample_categorical(t.row(h), rng)));
  return out;
}

std::vector<int> MissingPosterior::map_completion() const {
  std::vector<int> best;
  if (empty()) return best;
  for (std::size_t j = 0; j < tables_.size(); ++j) best.push_back(static_cast<int>(argmax(marginal(j))));
  double best_p = probability(best);
  std::vector<int> candidate(tables_.size());
  for (int h = 0; h < static_cast<int>(weights_.size()); ++h) {
    for (std::size_t j = 0; j < tables_.size(); ++j)
      candidate[j] = static_cast<int>(argmax(tables_[j].row(h)));
    const double p = probability(candidate);
    if (p > best_p) {
      best_p = p;
      best = candidate;
    }
  }
  return best;
}

MissingPosterior posterior_missing(const LatentClassModel& model, const ClinicalRecord& record) {
  check_record(model, record);
  auto features = record.missing_features();
  if (features.empty()) return {};
  const LogTables log_tables(model);
  auto weights = state_posterior(log_tables, record, model.latent_states());
  std::vector<EmissionTable> tables;
  tables.reserve(features.size());
  for (auto k : features) tables.push_back(model.emission(k));
  return MissingPosterior(std::move(weights), std::move(features), std::move(tables));
}

// ---------------------------------------------------------------- imputation

CohortPosterior::CohortPosterior(const LatentClassModel& model, const Cohort& cohort)
    : model_(model), records_(cohort.records) {
  model.check_schema(cohort.schema);
  const LogTables tables(model_);
  weights_.resize(records_.size());
  map_records_.reserve(records_.size());
  for (std::size_t n = 0; n < records_.size(); ++n) {
    const auto& r = records_[n];
    check_record(model_, r);
    auto features = r.missing_features();
    if (features.empty()) {
      map_records_.push_back(r);
      continue;
    }
    weights_[n] = state_posterior(tables, r, model_.latent_states());
    std::vector<EmissionTable> t;
    for (auto k : features) t.push_back(model_.emission(k));
    const MissingPosterior posterior(weights_[n], features, std::move(t));
    ClinicalRecord completed = r;
    const auto best = posterior.map_completion();
    for (std::size_t j = 0; j < best.size(); ++j) completed.states[features[j]] = best[j];
    map_records_.push_back(std::move(completed));
  }
}

ClinicalRecord CohortPosterior::sample(std::size_t n, Rng& rng) const {
  ClinicalRecord out = records_.at(n);
  const auto& w = weights_[n];
  if (w.empty()) return out;
  const auto h = static_cast<int>(sample_categorical(w, rng));
  for (std::size_t k = 0; k < out.states.size(); ++k)
    if (!out.states[k])
      out.states[k] = static_cast<int>(sample_categorical(model_.emission(k).row(h), rng));
  return out;
}


ImputeMode parse_impute_mode(std::string_view text) {
  if (text == "sample") return ImputeMode::sample;
  if (text == "map") return ImputeMode::map;
  if (text == "expectation") return ImputeMode::expectation;
  throw ValidationError("unknown imputation mode '" + std::string(text) +
                        "' (expected sample, map or expectation)");
}

ClinicalRecord impute_sample(const LatentClassModel& model, const ClinicalRecord& record, Rng& rng) {
  const auto posterior = posterior_missing(model, record);
  ClinicalRecord out = record;
  const auto draw = posterior.sample(rng);
  for (std::size_t j = 0; j < draw.size(); ++j) out.states[posterior.missing_features()[j]] = draw[j];
  return out;
}

ClinicalRecord impute_map(const LatentClassModel& model, const ClinicalRecord& record) {
  const auto posterior = posterior_missing(model, record);
  ClinicalRecord out = record;
  const auto best = posterior.map_completion();
  for (std::size_t j = 0; j < best.size(); ++j) out.states[posterior.missing_features()[j]] = best[j];
  return out;
}

ExpectationImputation impute_expectation(const LatentClassModel& model, const ClinicalRecord& record,
                                         const FeatureSchema& schema, const BinningSpec& binning) {
  const auto posterior = posterior_missing(model, record);
  ExpectationImputation out;
  out.record = record;
  out.values = to_raw(record, schema, binning);
  for (std::size_t j = 0; j < posterior.missing_features().size(); ++j) {
    const auto k = posterior.missing_features()[j];
    FeatureExpectation fe;
    fe.feature = k;
    fe.distribution = posterior.marginal(j);
    fe.most_probable = static_cast<int>(argmax(fe.distribution));
    if (schema[k].is_continuous()) {
      const auto& reps = binning.at(k).representatives;
      fe.point_value = 0.0;
      for (std::size_t b = 0; b < reps.size(); ++b) fe.point_value += fe.distribution.at(b) * reps[b];
    } else {
      fe.point_value = fe.most_probable;
    }
    out.record.states[k] = fe.most_probable;
    out.values.values[k] = fe.point_value;
    out.features.push_back(std::move(fe));
  }
  return out;
}

MeanImputer MeanImputer::fit(const Cohort& training, const BinningSpec& binning) {
  const auto& schema = training.schema;
  MeanImputer imp;
  for (std::size_t k = 0; k < schema.size(); ++k) {
    std::vector<std::size_t> freq(static_cast<std::size_t>(schema.cardinality(k)), 0);
    std::size_t observed = 0;
    for (const auto& r : training.records)
      if (r.states.at(k)) {
        ++freq.at(static_cast<std::size_t>(*r.states[k]));
        ++observed;
      }
    if (observed == 0)
      throw ValidationError("feature '" + schema[k].name + "' is never observed in training data");
    if (schema[k].is_continuous()) {
      const auto& entry = binning.at(k);
      double sum = 0.0;
      for (std::size_t b = 0; b < freq.size(); ++b) sum += freq[b] * entry.representatives.at(b);
      const double mean = sum / static_cast<double>(observed);
      imp.fill_values_.push_back(mean);
      imp.fill_states_.push_back(entry.bin_of(mean));
    } else {
      const auto mode = static_cast<int>(std::max_element(freq.begin(), freq.end()) - freq.begin());
      imp.fill_values_.push_back(mode);
      imp.fill_states_.push_back(mode);
    }
  }
  return imp;
}

ClinicalRecord MeanImputer::impute(const ClinicalRecord& record) const {
  ClinicalRecord out = record;
  for (std::size_t k = 0; k < out.states.size(); ++k)
    if (!out.states[k]) out.states[k] = fill_states_.at(k);
  return out;
}

RawRecord MeanImputer::impute_raw(const RawRecord& record) const {
  RawRecord out = record;
  for (std::size_t k = 0; k < out.values.size(); ++k)
    if (!out.values[k]) out.values[k] = fill_values_.at(k);
  return out;
}

}  // namespace mbsurv
