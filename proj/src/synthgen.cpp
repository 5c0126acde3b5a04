#include "mbsurv/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mbsurv/errors.hpp"
#include "mbsurv/metrics.hpp"
#include "mbsurv/rng.hpp"

namespace mbsurv {

namespace {

constexpr double kNormTolerance = 1e-9;

void check_distribution(std::span<const double> p, const std::string& what) {
  if (p.empty()) throw ValidationError(what + ": empty distribution");
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(what + ": negative or non-finite probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kNormTolerance) throw ValidationError(what + ": probabilities do not sum to 1");
}

void check_rate(double rate, const char* what) {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw ValidationError(std::string(what) + " must be positive");
}

std::vector<double> normalized(std::vector<double> w) {
  const double sum = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& v : w) v /= sum;
  return w;
}

std::string patient_id(std::size_t i, std::size_t n) {
  const int width = std::max(4, static_cast<int>(std::to_string(n).size()));
  char buf[32];
  std::snprintf(buf, sizeof buf, "P%0*zu", width, i + 1);
  return buf;
}

double exponential(double rate, Rng& rng) { return -std::log1p(-uniform01(rng)) / rate; }

/// Draws a class and one level per feature.
int draw_levels(const GeneratorSpec& spec, Rng& rng, std::vector<int>& levels) {
  const int h = static_cast<int>(sample_categorical(spec.prior, rng));
  levels.resize(spec.features.size());
  for (std::size_t k = 0; k < spec.features.size(); ++k)
    levels[k] = static_cast<int>(sample_categorical(spec.features[k].emissions[static_cast<std::size_t>(h)], rng));
  return h;
}

/// Peaked distribution over `levels` centred at `centre`, with seeded jitter.
std::vector<double> peaked(int levels, double centre, double sharpness, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(levels));
  for (int l = 0; l < levels; ++l)
    w[static_cast<std::size_t>(l)] = std::exp(-sharpness * std::abs(l - centre)) * (0.8 + 0.4 * uniform01(rng)) + 0.01;
  return normalized(std::move(w));
}

}  // namespace

// ---------------------------------------------------------------- spec

void GeneratorSpec::validate() const {
  if (latent_states < 1) throw ValidationError("generator: latent_states must be >= 1");
  if (prior.size() != static_cast<std::size_t>(latent_states))
    throw ValidationError("generator: prior length differs from latent_states");
  check_distribution(prior, "generator prior");
  check_rate(baseline_rate, "baseline_rate");
  check_rate(censoring_rate, "censoring_rate");
  if (features.empty()) throw ValidationError("generator: no features");
  for (const auto& f : features) {
    const std::string where = "generator feature '" + f.name + "'";
    const int levels = f.level_count();
    if (levels < 1) throw ValidationError(where + ": needs at least one level");
    if (f.kind == FeatureKind::continuous && (!(f.scale > 0.0) || !std::isfinite(f.offset)))
      throw ValidationError(where + ": scale must be positive");
    if (!(f.missingness >= 0.0 && f.missingness < 1.0))
      throw ValidationError(where + ": missingness must be in [0, 1)");
    if (f.always_observed && f.missingness != 0.0)
      throw ValidationError(where + ": always-observed feature must have missingness 0");
    if (f.risk_weights.size() != static_cast<std::size_t>(levels))
      throw ValidationError(where + ": need one risk weight per level");
    for (double w : f.risk_weights)
      if (!std::isfinite(w)) throw ValidationError(where + ": non-finite risk weight");
    if (f.emissions.size() != static_cast<std::size_t>(latent_states))
      throw ValidationError(where + ": need one emission row per latent state");
    for (const auto& row : f.emissions) {
      if (row.size() != static_cast<std::size_t>(levels))
        throw ValidationError(where + ": emission row length differs from level count");
      check_distribution(row, where + " emissions");
    }
  }
  schema();  // name uniqueness and cardinality checks
}

FeatureSchema GeneratorSpec::schema() const {
  std::vector<FeatureSpec> specs;
  std::vector<std::size_t> always;
  for (std::size_t k = 0; k < features.size(); ++k) {
    const auto& f = features[k];
    FeatureSpec s;
    s.name = f.name;
    s.kind = f.kind;
    if (f.kind == FeatureKind::categorical)
      s.categories = f.categories;
    else
      s.bin_count = f.bin_count;
    specs.push_back(std::move(s));
    if (f.always_observed) always.push_back(k);
  }
  return FeatureSchema(std::move(specs), std::move(always));
}

double GeneratorSpec::score(std::span<const int> levels) const {
  double s = 0.0;
  for (std::size_t k = 0; k < features.size(); ++k)
    s += features[k].risk_weights.at(static_cast<std::size_t>(levels[k]));
  return s;
}

json GeneratorSpec::to_json() const {
  json fs = json::array();
  for (const auto& f : features) {
    json j{{"name", f.name},
           {"kind", f.kind == FeatureKind::categorical ? "categorical" : "continuous"},
           {"missingness", f.missingness},
           {"always_observed", f.always_observed},
           {"risk_weights", f.risk_weights},
           {"emissions", f.emissions}};
    if (f.kind == FeatureKind::categorical) {
      j["categories"] = f.categories;
    } else {
      j["levels"] = f.levels;
      j["offset"] = f.offset;
      j["scale"] = f.scale;
      j["bin_count"] = f.bin_count;
    }
    fs.push_back(std::move(j));
  }
  return {{"format", "generator_spec"},
          {"n", n},
          {"seed", seed},
          {"latent_states", latent_states},
          {"prior", prior},
          {"baseline_rate", baseline_rate},
          {"censoring_rate", censoring_rate},
          {"features", fs}};
}

GeneratorSpec GeneratorSpec::from_json(const json& j) {
  try {
    GeneratorSpec spec;
    spec.n = j.at("n").get<std::size_t>();
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.latent_states = j.at("latent_states").get<int>();
    spec.prior = j.at("prior").get<std::vector<double>>();
    spec.baseline_rate = j.at("baseline_rate").get<double>();
    spec.censoring_rate = j.at("censoring_rate").get<double>();
    for (const auto& fj : j.at("features")) {
      GeneratedFeature f;
      f.name = fj.at("name").get<std::string>();
      const auto kind = fj.at("kind").get<std::string>();
      if (kind == "categorical") {
        f.kind = FeatureKind::categorical;
        f.categories = fj.at("categories").get<std::vector<std::string>>();
      } else if (kind == "continuous") {
        f.kind = FeatureKind::continuous;
        f.levels = fj.at("levels").get<int>();
        f.offset = fj.value("offset", 0.0);
        f.scale = fj.value("scale", 1.0);
        f.bin_count = fj.value("bin_count", kDefaultBinCount);
      } else {
        throw ValidationError("generator feature '" + f.name + "': unknown kind '" + kind + "'");
      }
      f.missingness = fj.value("missingness", 0.0);
      f.always_observed = fj.value("always_observed", false);
      f.risk_weights = fj.at("risk_weights").get<std::vector<double>>();
      f.emissions = fj.at("emissions").get<std::vector<std::vector<double>>>();
      spec.features.push_back(std::move(f));
    }
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid generator spec: ") + e.what());
  }
}

json GroundTruth::to_json() const {
  return {{"format", "synthetic_ground_truth"},
          {"patient_ids",
           [&] {
             std::vector<std::string> ids;
             for (const auto& r : complete.records) ids.push_back(r.patient_id);
             return ids;
           }()},
          {"classes", classes},
          {"true_scores", true_scores},
          {"death_times", death_times},
          {"censoring_times", censoring_times},
          {"levels", levels}};
}

// ---------------------------------------------------------------- generation

SyntheticCohort generate(const GeneratorSpec& spec) {
  spec.validate();
  const FeatureSchema schema = spec.schema();
  auto patient_rng = make_rng(spec.seed, "synth-patients");
  auto time_rng = make_rng(spec.seed, "synth-times");
  auto value_rng = make_rng(spec.seed, "synth-values");
  auto mask_rng = make_rng(spec.seed, "synth-mask");

  SyntheticCohort out;
  auto& truth = out.truth;
  truth.complete.schema = schema;
  truth.complete.outcomes.emplace();
  const std::size_t k_count = spec.features.size();
  std::vector<int> levels;
  for (std::size_t i = 0; i < spec.n; ++i) {
    const int h = draw_levels(spec, patient_rng, levels);
    const double s = spec.score(levels);
    const double death = exponential(spec.baseline_rate * std::exp(s), time_rng);
    const double censor = exponential(spec.censoring_rate, time_rng);

    RawRecord record{patient_id(i, spec.n), std::vector<std::optional<double>>(k_count)};
    for (std::size_t k = 0; k < k_count; ++k) {
      const auto& f = spec.features[k];
      record.values[k] = f.kind == FeatureKind::categorical
                             ? static_cast<double>(levels[k])
                             : f.offset + f.scale * (levels[k] + uniform01(value_rng));
    }
    truth.classes.push_back(h);
    truth.true_scores.push_back(s);
    truth.death_times.push_back(death);
    truth.censoring_times.push_back(censor);
    truth.levels.push_back(levels);
    truth.complete.records.push_back(std::move(record));
    truth.complete.outcomes->push_back({std::min(death, censor), death <= censor});
  }

  out.cohort = truth.complete;
  for (auto& record : out.cohort.records)
    for (std::size_t k = 0; k < k_count; ++k) {
      const double p = spec.features[k].missingness;
      if (p > 0.0 && uniform01(mask_rng) < p) record.values[k].reset();
    }
  return out;
}

double oracle_cindex(const GroundTruth& truth, std::span<const SurvivalOutcome> outcomes) {
  return harrell_cindex(truth.true_scores, outcomes);
}

double oracle_cindex(const SyntheticCohort& synthetic) {
  return oracle_cindex(synthetic.truth, synthetic.cohort.outcome_span());
}

double expected_censored_fraction(const GeneratorSpec& spec, double censoring_rate, std::size_t draws) {
  check_rate(censoring_rate, "censoring_rate");
  auto rng = make_rng(spec.seed, "censoring-solver");
  std::vector<int> levels;
  double total = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    draw_levels(spec, rng, levels);
    total += censoring_rate / (censoring_rate + spec.baseline_rate * std::exp(spec.score(levels)));
  }
  return total / static_cast<double>(draws);
}

double solve_censoring_rate(const GeneratorSpec& spec, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("censored fraction must be in (0, 1)");
  // fraction is increasing in the rate; bisect on log scale
  double lo = std::log(spec.baseline_rate) - 20.0;
  double hi = std::log(spec.baseline_rate) + 20.0;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (expected_censored_fraction(spec, std::exp(mid), 4000) < fraction)
      lo = mid;
    else
      hi = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

// ---------------------------------------------------------------- spec builders

GeneratorSpec random_spec(const RandomSpecOptions& options, std::uint64_t seed) {
  if (options.latent_states < 1 || options.min_categories < 2 || options.max_categories < options.min_categories ||
      options.categorical_features < 0 || options.continuous_features < 0 || options.continuous_levels < 1)
    throw ValidationError("random_spec: invalid options");
  auto rng = make_rng(seed, "random-spec");
  GeneratorSpec spec;
  spec.n = options.n;
  spec.seed = seed;
  spec.latent_states = options.latent_states;
  spec.baseline_rate = options.baseline_rate;
  spec.censoring_rate = options.censoring_rate;
  const auto h_count = static_cast<std::size_t>(options.latent_states);
  {
    std::vector<double> w(h_count);
    for (double& v : w) v = 0.5 + uniform01(rng);
    spec.prior = normalized(std::move(w));
  }
  auto table = [&](int levels) {
    std::vector<std::vector<double>> rows(h_count);
    for (auto& row : rows) {
      row.resize(static_cast<std::size_t>(levels));
      for (double& v : row) v = std::exp(options.sharpness * 2.0 * (uniform01(rng) - 0.5) * 2.0);
      row = normalized(std::move(row));
    }
    return rows;
  };
  auto weights = [&](int levels) {
    std::vector<double> w(static_cast<std::size_t>(levels));
    for (double& v : w) v = options.risk_scale * (2.0 * uniform01(rng) - 1.0);
    return w;
  };
  const int total = options.categorical_features + options.continuous_features;
  for (int k = 0; k < total; ++k) {
    GeneratedFeature f;
    f.name = "x" + std::to_string(k + 1);
    f.missingness = options.missingness;
    if (k < options.categorical_features) {
      f.kind = FeatureKind::categorical;
      const int span = options.max_categories - options.min_categories + 1;
      const int c = options.min_categories + static_cast<int>(rng() % static_cast<std::uint64_t>(span));
      for (int i = 0; i < c; ++i) f.categories.push_back("c" + std::to_string(i));
    } else {
      f.kind = FeatureKind::continuous;
      f.levels = options.continuous_levels;
      f.bin_count = std::max(2, options.continuous_levels);
    }
    f.emissions = table(f.level_count());
    f.risk_weights = weights(f.level_count());
    spec.features.push_back(std::move(f));
  }
  spec.validate();
  return spec;
}

GeneratorSpec clinical_like_spec(const ClinicalSpecOptions& options, std::uint64_t seed) {
  constexpr int kClasses = 5;
  constexpr double kSharpness = 1.3;
  auto rng = make_rng(seed, "clinical-spec");
  GeneratorSpec spec;
  spec.n = options.n;
  spec.seed = seed;
  spec.latent_states = kClasses;
  spec.baseline_rate = 0.005;
  {
    std::vector<double> w(kClasses);
    for (double& v : w) v = 0.8 + 0.4 * uniform01(rng);
    spec.prior = normalized(std::move(w));
  }

  // class h has disease severity h / (kClasses - 1); each feature follows it
  // with its own direction
  auto severity_table = [&](int levels, bool increasing) {
    std::vector<std::vector<double>> rows;
    for (int h = 0; h < kClasses; ++h) {
      const double sev = static_cast<double>(h) / (kClasses - 1);
      const double centre = (increasing ? sev : 1.0 - sev) * (levels - 1);
      rows.push_back(peaked(levels, centre, kSharpness, rng));
    }
    return rows;
  };
  auto continuous = [&](std::string name, double offset, double scale, bool increasing,
                        std::vector<double> weights, bool always) {
    GeneratedFeature f;
    f.name = std::move(name);
    f.kind = FeatureKind::continuous;
    f.levels = static_cast<int>(weights.size());
    f.offset = offset;
    f.scale = scale;
    f.bin_count = kDefaultBinCount;
    f.always_observed = always;
    f.missingness = always ? 0.0 : options.missingness;
    f.risk_weights = std::move(weights);
    f.emissions = severity_table(f.levels, increasing);
    return f;
  };
  auto categorical = [&](std::string name, std::vector<std::string> categories, bool increasing,
                         std::vector<double> weights, bool always) {
    GeneratedFeature f;
    f.name = std::move(name);
    f.kind = FeatureKind::categorical;
    f.categories = std::move(categories);
    f.always_observed = always;
    f.missingness = always ? 0.0 : options.missingness;
    f.risk_weights = std::move(weights);
    f.emissions = severity_table(f.level_count(), increasing);
    return f;
  };

  spec.features.push_back(continuous("age", 45.0, 6.0, true, {-0.6, -0.35, -0.1, 0.1, 0.35, 0.6}, true));
  spec.features.push_back(categorical("sex", {"female", "male"}, true, {-0.15, 0.15}, true));
  spec.features.push_back(categorical("smoking", {"never", "former", "current"}, true, {-0.3, 0.0, 0.3}, false));
  spec.features.push_back(categorical("antifibrotic", {"yes", "no"}, true, {-0.25, 0.25}, false));
  spec.features.push_back(
      continuous("fvc_percent", 40.0, 12.0, false, {0.8, 0.5, 0.2, -0.1, -0.4, -0.7}, false));
  spec.features.push_back(continuous("dlco", 20.0, 10.0, false, {0.7, 0.4, 0.15, -0.1, -0.35, -0.6}, false));
  // 0.9 puts the Harrell C-index of the true scores at about 0.80
  for (auto& f : spec.features)
    for (double& w : f.risk_weights) w *= 0.9 * options.risk_scale;

  spec.censoring_rate = solve_censoring_rate(spec, options.censored_fraction);
  spec.validate();
  return spec;
}

}  // namespace mbsurv
