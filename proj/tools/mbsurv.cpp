// Command-line front end: simulate, train-imputer, impute, impute-eval,
// train-survival, evaluate, cross-validate.

#include <cctype>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mbsurv/data_model.hpp"
#include "mbsurv/diagnostics.hpp"
#include "mbsurv/errors.hpp"
#include "mbsurv/imputer.hpp"
#include "mbsurv/pipeline.hpp"
#include "mbsurv/rng.hpp"
#include "mbsurv/synthgen.hpp"

namespace {

using namespace mbsurv;

/// Config files may be INI-style key=value text or a JSON object. Keys outside
/// any section apply to the subcommand being run.
class IniOrJsonConfig : public CLI::Config {
 public:
  explicit IniOrJsonConfig(const CLI::App* app) : app_(app) {}

  std::string to_config(const CLI::App* app, bool default_also, bool write_description,
                        std::string prefix) const override {
    return CLI::ConfigINI().to_config(app, default_also, write_description, std::move(prefix));
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    const std::string text{std::istreambuf_iterator<char>(input), std::istreambuf_iterator<char>()};
    const auto first = text.find_first_not_of(" \t\r\n");
    std::vector<CLI::ConfigItem> items;
    if (first == std::string::npos || text[first] != '{') {
      std::istringstream in(text);
      items = CLI::ConfigINI().from_config(in);
    } else {
      json j;
      try {
        j = json::parse(text);
      } catch (const json::exception& e) {
        throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
      }
      flatten(j, {}, items);
    }
    const auto active = app_->get_subcommands();
    if (!active.empty())
      for (auto& item : items)
        if (item.parents.empty() || (item.parents.size() == 1 && item.parents[0] == "default"))
          item.parents = {active.front()->get_name()};
    return items;
  }

 private:
  const CLI::App* app_;

  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void flatten(const json& obj, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (it->is_object()) {
        auto p = parents;
        p.push_back(it.key());
        flatten(*it, p, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = it.key();
      if (it->is_array())
        for (const auto& v : *it) item.inputs.push_back(scalar(v));
      else
        item.inputs.push_back(scalar(*it));
      out.push_back(std::move(item));
    }
  }
};

void write_json(const std::string& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

void emit_json(const std::string& path, const json& j) {
  if (path.empty())
    std::cout << j.dump(2) << "\n";
  else
    write_json(path, j);
}

RawCohort read_cohort(const std::string& cohort_path, const std::string& schema_path) {
  const FeatureSchema schema = load_schema(schema_path);
  return load_cohort(cohort_path, schema);
}

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& description) {
  auto* cmd = app.add_subcommand(name, description);
  cmd->fallthrough();
  return cmd;
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string spec_path;
  std::string preset = "clinical";
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  std::optional<double> missingness;
  double censored_fraction = 0.4;
  double risk_scale = 1.0;
  std::string out, truth, schema_out, spec_out;
};

void run_simulate(const SimulateArgs& a) {
  GeneratorSpec spec;
  if (!a.spec_path.empty()) {
    spec = GeneratorSpec::from_json(read_json_file(a.spec_path));
  } else if (a.preset == "clinical") {
    ClinicalSpecOptions o;
    o.n = a.n.value_or(o.n);
    o.missingness = a.missingness.value_or(o.missingness);
    o.censored_fraction = a.censored_fraction;
    o.risk_scale = a.risk_scale;
    spec = clinical_like_spec(o, a.seed.value_or(0));
  } else {
    RandomSpecOptions o;
    o.n = a.n.value_or(o.n);
    o.missingness = a.missingness.value_or(o.missingness);
    spec = random_spec(o, a.seed.value_or(0));
  }
  if (a.n) spec.n = *a.n;
  if (a.seed) spec.seed = *a.seed;
  if (a.missingness)
    for (auto& f : spec.features)
      if (!f.always_observed) f.missingness = *a.missingness;
  spec.validate();

  const SyntheticCohort synthetic = generate(spec);
  save_cohort_csv(a.out, synthetic.cohort);
  if (!a.truth.empty()) {
    json truth = synthetic.truth.to_json();
    truth["oracle_cindex"] = oracle_cindex(synthetic);
    write_json(a.truth, truth);
  }
  if (!a.schema_out.empty()) write_json(a.schema_out, spec.schema().to_json());
  if (!a.spec_out.empty()) write_json(a.spec_out, spec.to_json());
}

// ---------------------------------------------------------------- imputer

struct ImputerArgs {
  std::string cohort, schema, out, report;
  int latent_states = kDefaultLatentStates;
  EmConfig em;
};

void run_train_imputer(const ImputerArgs& a) {
  const RawCohort cohort = read_cohort(a.cohort, a.schema);
  const ImputerFit fit = fit_imputer(cohort, a.latent_states, a.em);
  write_json(a.out, fit.bundle.to_json());
  const json report{{"n", cohort.size()},
                    {"latent_states", a.latent_states},
                    {"iterations", fit.em.iterations},
                    {"converged", fit.em.converged},
                    {"final_log_likelihood", fit.em.log_likelihood_trace.back()},
                    {"log_likelihood_trace", fit.em.log_likelihood_trace}};
  emit_json(a.report, report);
}

struct ImputeArgs {
  std::string cohort, schema, model, out, mode = "map";
  std::optional<std::uint64_t> seed;
};

void run_impute(const ImputeArgs& a) {
  const RawCohort cohort = read_cohort(a.cohort, a.schema);
  const ImputerBundle bundle = ImputerBundle::from_json(read_json_file(a.model), cohort.schema);
  const ImputeMode mode = parse_impute_mode(a.mode);
  std::uint64_t seed = a.seed.value_or(0);
  if (mode == ImputeMode::sample && !a.seed) {
    seed = entropy_seed();
    warn("impute: no --seed given; sampling from an entropy seed is not reproducible");
  }
  save_cohort_csv(a.out, impute_cohort(bundle, cohort, mode, seed));
}

struct ImputeEvalArgs {
  std::string train, test, schema, out, csv;
  ImputeEvalConfig config;
};

void run_impute_eval_command(const ImputeEvalArgs& a) {
  const FeatureSchema schema = load_schema(a.schema);
  const RawCohort train = load_cohort(a.train, schema);
  const RawCohort test = load_cohort(a.test, schema);
  const ImputeEvalReport report = run_impute_eval(train, test, a.config);
  emit_json(a.out, report.to_json());
  if (!a.csv.empty()) write_text_file(a.csv, report.to_csv());
}

// ---------------------------------------------------------------- survival

struct SurvivalArgs {
  SurvivalSettings settings;
  std::string architecture = "linear";
  std::vector<int> hidden = {kDefaultHiddenWidth};
  bool no_memory_bank = false;
  std::string imputation = "sample";
  std::uint64_t seed = 0;

  SurvivalSettings resolve() const {
    SurvivalSettings s = settings;
    if (architecture == "linear")
      s.architecture = Architecture::linear();
    else if (architecture == "mlp")
      s.architecture = Architecture::mlp(hidden);
    else
      throw ValidationError("unknown architecture '" + architecture + "' (expected linear or mlp)");
    s.memory_bank = !no_memory_bank;
    if (imputation == "sample")
      s.train.imputation = TrainingImputation::sample;
    else if (imputation == "map")
      s.train.imputation = TrainingImputation::map;
    else
      throw ValidationError("unknown training imputation '" + imputation + "' (expected sample or map)");
    s.em.seed = seed;
    s.train.seed = seed;
    s.train.validate();
    return s;
  }
};

void add_survival_options(CLI::App* cmd, SurvivalArgs& a) {
  auto& s = a.settings;
  cmd->add_option("--latent-states", s.latent_states, "Hidden states of the imputation model")->capture_default_str();
  cmd->add_option("--epochs", s.train.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch-size", s.train.batch_size, "Minibatch size")->capture_default_str();
  cmd->add_option("--lr", s.train.lr, "Initial Adam learning rate")->capture_default_str();
  cmd->add_option("--lr-decay-epoch", s.train.lr_decay_epoch, "Epochs before the learning-rate decay")
      ->capture_default_str();
  cmd->add_option("--lr-decay-factor", s.train.lr_decay_factor, "Learning-rate decay factor")->capture_default_str();
  cmd->add_option("--architecture", a.architecture, "linear or mlp")->capture_default_str();
  cmd->add_option("--hidden", a.hidden, "Hidden layer widths for the mlp")->capture_default_str();
  cmd->add_flag("--no-memory-bank", a.no_memory_bank, "Use batch-only risk sets (skips death-free batches)");
  cmd->add_option("--imputation", a.imputation, "Training-time imputation: sample or map")->capture_default_str();
  cmd->add_option("--max-iters", s.em.max_iters, "EM iteration cap")->capture_default_str();
  cmd->add_option("--seed", a.seed, "Root random seed")->capture_default_str();
}

struct TrainSurvivalArgs {
  std::string cohort, schema, out, log, report;
  SurvivalArgs survival;
};

void run_train_survival(const TrainSurvivalArgs& a) {
  const RawCohort cohort = read_cohort(a.cohort, a.schema);
  const SurvivalFit fit = fit_survival(cohort, a.survival.resolve());
  write_json(a.out, fit.bundle.to_json());
  if (!a.log.empty()) {
    std::string lines;
    for (const auto& entry : fit.training.log) lines += to_json(entry).dump() + "\n";
    write_text_file(a.log, lines);
  }
  const auto& t = fit.training;
  const json report{{"n", cohort.size()},
                    {"training_deaths", t.training_deaths},
                    {"memory_bank", !a.survival.no_memory_bank},
                    {"steps", t.steps},
                    {"total_batches", t.total_batches},
                    {"skipped_batches", t.skipped_batches},
                    {"skip_rate", t.skip_rate()},
                    {"min_step_deaths", t.min_step_deaths},
                    {"max_step_deaths", t.max_step_deaths},
                    {"final_fresh_loss", t.log.back().fresh_loss},
                    {"em_iterations", fit.em.iterations},
                    {"em_converged", fit.em.converged}};
  emit_json(a.report, report);
}

struct EvaluateArgs {
  std::string model, cohort, schema, out;
  std::optional<double> tau;
  bool graf = false;
};

void run_evaluate(const EvaluateArgs& a) {
  const RawCohort cohort = read_cohort(a.cohort, a.schema);
  const SurvivalBundle bundle = SurvivalBundle::from_json(read_json_file(a.model), cohort.schema);
  emit_json(a.out, evaluate(bundle, cohort, a.tau, a.graf).to_json());
}

struct CrossValidateArgs {
  std::string cohort, schema, out, csv;
  int folds = kDefaultFolds;
  SurvivalArgs survival;
};

void run_cross_validate(const CrossValidateArgs& a) {
  const RawCohort cohort = read_cohort(a.cohort, a.schema);
  const auto report = cross_validate(cohort, a.folds, a.survival.resolve(), a.survival.seed);
  emit_json(a.out, report.to_json());
  if (!a.csv.empty()) write_text_file(a.csv, report.to_csv());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Survival modelling with latent-class imputation and memory-bank Cox training"};
  app.require_subcommand(1);
  app.config_formatter(std::make_shared<IniOrJsonConfig>(&app));
  app.set_config("--config", "", "Read options from an INI (key=value) or JSON file; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);

  SimulateArgs sim;
  auto* simulate = add_command(app, "simulate", "Generate a synthetic cohort with ground truth");
  simulate->add_option("--spec", sim.spec_path, "Generator spec JSON (overrides --preset)");
  simulate->add_option("--preset", sim.preset, "Built-in generator: clinical or random")
      ->check(CLI::IsMember({"clinical", "random"}))
      ->capture_default_str();
  simulate->add_option("--n", sim.n, "Number of patients");
  simulate->add_option("--seed", sim.seed, "Random seed");
  simulate->add_option("--missingness", sim.missingness, "Missingness probability of every maskable feature");
  simulate->add_option("--censored-fraction", sim.censored_fraction, "Target censored fraction (clinical preset)")
      ->capture_default_str();
  simulate->add_option("--risk-scale", sim.risk_scale, "Risk weight multiplier (clinical preset)")
      ->capture_default_str();
  simulate->add_option("--out", sim.out, "Output cohort CSV")->required();
  simulate->add_option("--truth", sim.truth, "Output ground-truth JSON");
  simulate->add_option("--schema-out", sim.schema_out, "Output feature schema JSON");
  simulate->add_option("--spec-out", sim.spec_out, "Output generator spec JSON");

  ImputerArgs imp;
  auto* train_imputer = add_command(app, "train-imputer", "Fit the latent-class imputation model");
  train_imputer->add_option("--cohort", imp.cohort, "Cohort CSV")->required();
  train_imputer->add_option("--schema", imp.schema, "Feature schema JSON")->required();
  train_imputer->add_option("--out", imp.out, "Output model JSON")->required();
  train_imputer->add_option("--report", imp.report, "Fit report JSON (stdout if omitted)");
  train_imputer->add_option("--latent-states", imp.latent_states, "Hidden states")->capture_default_str();
  train_imputer->add_option("--max-iters", imp.em.max_iters, "EM iteration cap")->capture_default_str();
  train_imputer->add_option("--tol", imp.em.rel_tol, "Relative log-likelihood tolerance")->capture_default_str();
  train_imputer->add_option("--smoothing", imp.em.smoothing, "Additive pseudocount")->capture_default_str();
  train_imputer->add_option("--seed", imp.em.seed, "Random seed")->capture_default_str();

  ImputeArgs imputing;
  auto* impute = add_command(app, "impute", "Fill missing values with a fitted imputation model");
  impute->add_option("--cohort", imputing.cohort, "Cohort CSV")->required();
  impute->add_option("--schema", imputing.schema, "Feature schema JSON")->required();
  impute->add_option("--model", imputing.model, "Imputation model JSON")->required();
  impute->add_option("--out", imputing.out, "Output cohort CSV")->required();
  impute->add_option("--mode", imputing.mode, "sample, map or expectation")
      ->check(CLI::IsMember({"sample", "map", "expectation"}))
      ->capture_default_str();
  impute->add_option("--seed", imputing.seed, "Random seed for --mode sample (default: entropy, nondeterministic)");

  ImputeEvalArgs ev_imp;
  auto* impute_eval = add_command(app, "impute-eval", "Mask test features and compare imputers");
  impute_eval->add_option("--train", ev_imp.train, "Training cohort CSV")->required();
  impute_eval->add_option("--test", ev_imp.test, "Complete test cohort CSV")->required();
  impute_eval->add_option("--schema", ev_imp.schema, "Feature schema JSON")->required();
  impute_eval->add_option("--drop-counts", ev_imp.config.drop_counts, "Features dropped per test record")
      ->capture_default_str();
  impute_eval->add_option("--repeats", ev_imp.config.repeats, "Repeats per drop count")->capture_default_str();
  impute_eval->add_option("--latent-states", ev_imp.config.latent_states, "Hidden states")->capture_default_str();
  impute_eval->add_option("--seed", ev_imp.config.seed, "Random seed")->capture_default_str();
  impute_eval->add_option("--out", ev_imp.out, "Report JSON (stdout if omitted)");
  impute_eval->add_option("--csv", ev_imp.csv, "Report table CSV");

  TrainSurvivalArgs ts;
  auto* train_survival = add_command(app, "train-survival", "Train the Cox risk model");
  train_survival->add_option("--cohort", ts.cohort, "Cohort CSV with time/event columns")->required();
  train_survival->add_option("--schema", ts.schema, "Feature schema JSON")->required();
  train_survival->add_option("--out", ts.out, "Output model JSON")->required();
  train_survival->add_option("--log", ts.log, "Per-epoch training log (JSON lines)");
  train_survival->add_option("--report", ts.report, "Training report JSON (stdout if omitted)");
  add_survival_options(train_survival, ts.survival);

  EvaluateArgs ev;
  auto* evaluate_cmd = add_command(app, "evaluate", "IPCW C-index, Harrell C-index and integrated Brier score");
  evaluate_cmd->add_option("--model", ev.model, "Survival model JSON")->required();
  evaluate_cmd->add_option("--cohort", ev.cohort, "Test cohort CSV")->required();
  evaluate_cmd->add_option("--schema", ev.schema, "Feature schema JSON")->required();
  evaluate_cmd->add_option("--tau", ev.tau, "IPCW truncation time (default: largest test death time)");
  evaluate_cmd->add_flag("--graf", ev.graf, "Inverse-probability-of-censoring weighted Brier score");
  evaluate_cmd->add_option("--out", ev.out, "Report JSON (stdout if omitted)");

  CrossValidateArgs cv;
  auto* cross = add_command(app, "cross-validate", "Stratified k-fold cross-validation");
  cross->add_option("--cohort", cv.cohort, "Cohort CSV with time/event columns")->required();
  cross->add_option("--schema", cv.schema, "Feature schema JSON")->required();
  cross->add_option("--folds", cv.folds, "Number of folds")->capture_default_str();
  cross->add_option("--out", cv.out, "Report JSON (stdout if omitted)");
  cross->add_option("--csv", cv.csv, "Per-fold table CSV");
  add_survival_options(cross, cv.survival);

  try {
    app.parse(argc, argv);
  } catch (const CLI::FileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*simulate) run_simulate(sim);
    else if (*train_imputer) run_train_imputer(imp);
    else if (*impute) run_impute(imputing);
    else if (*impute_eval) run_impute_eval_command(ev_imp);
    else if (*train_survival) run_train_survival(ts);
    else if (*evaluate_cmd) run_evaluate(ev);
    else if (*cross) run_cross_validate(cv);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
