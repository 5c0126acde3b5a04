#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "mbsurv/survival_trainer.hpp"
#include "support.hpp"

using namespace mbsurv;

namespace {

// Brute-force partial likelihood straight from the risk-set definition.
double oracle_cox_loss(const std::vector<double>& g, const std::vector<SurvivalOutcome>& y) {
  double total = 0.0;
  int deaths = 0;
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!y[n].event) continue;
    double denom = 0.0;
    for (std::size_t m = 0; m < g.size(); ++m)
      if (y[m].time >= y[n].time) denom += std::exp(g[m]);
    total += g[n] - std::log(denom);
    ++deaths;
  }
  return -total / deaths;
}

std::vector<SurvivalOutcome> random_outcomes(Rng& rng, std::size_t n, double death_prob) {
  std::vector<SurvivalOutcome> y(n);
  for (auto& o : y) o = {std::floor(uniform01(rng) * 10.0), uniform01(rng) < death_prob};
  return y;
}

struct Fixture {
  Cohort cohort;
  LatentClassModel imputer;
  FeatureEncoder encoder;
};

// Categorical cohort whose hazard depends on the first two features.
Fixture make_fixture(std::size_t n, double censor_rate, std::uint64_t seed) {
  auto rng = make_rng(seed, "fixture");
  const auto schema = testing::categorical_schema({3, 3, 2});
  std::vector<std::vector<int>> rows;
  std::vector<SurvivalOutcome> y;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> row{testing::uniform_int(rng, 0, 2), testing::uniform_int(rng, 0, 2),
                         testing::uniform_int(rng, 0, 1)};
    const double risk = 0.8 * row[0] - 0.5 * row[1];
    const double t = -std::log(1.0 - uniform01(rng)) / std::exp(risk);
    const double c = -std::log(1.0 - uniform01(rng)) / censor_rate;
    for (auto& s : row)
      if (uniform01(rng) < 0.15) s = -1;
    rows.push_back(row);
    y.push_back({std::min(t, c), t <= c});
  }
  Fixture f;
  f.cohort = testing::make_cohort(schema, rows);
  f.cohort.outcomes = y;
  EmConfig em;
  em.seed = seed;
  em.max_iters = 50;
  f.imputer = fit_em(f.cohort, 2, em).model;
  f.encoder = FeatureEncoder::fit(f.cohort, BinningSpec{{std::nullopt, std::nullopt, std::nullopt}});
  return f;
}

TrainConfig small_config(int batch) {
  TrainConfig c;
  c.epochs = 6;
  c.batch_size = batch;
  c.lr_decay_epoch = 3;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("Cox loss hand example") {
  const std::vector<double> g{0.0, 0.0};
  const auto y = testing::outcomes({1, 2}, {1, 1});
  const auto loss = cox_loss(g, y, RiskSetIndex(y));
  CHECK(std::abs(loss.loss - std::log(2.0) / 2.0) < 1e-12);
  CHECK(loss.deaths == 2);
}

TEST_CASE("Cox loss needs a death") {
  const std::vector<double> g{0.3, 0.1};
  const auto y = testing::outcomes({1, 2}, {0, 0});
  CHECK_THROWS_AS(cox_loss(g, y, RiskSetIndex(y)), AllCensoredError);
}

TEST_CASE("Cox loss matches the brute-force oracle with tied times") {
  auto rng = make_rng(1, "cox-oracle");
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 30;
    auto y = random_outcomes(rng, n, 0.5);
    y[rng() % n].event = true;
    std::vector<double> g(n);
    for (auto& s : g) s = testing::uniform(rng, -3, 3);
    const auto loss = cox_loss(g, y, RiskSetIndex(y));
    CHECK(std::abs(loss.loss - oracle_cox_loss(g, y)) < 1e-12);
  }
}

TEST_CASE("Cox loss is invariant to a common shift of the scores") {
  auto rng = make_rng(2, "cox-shift");
  const auto y = random_outcomes(rng, 25, 0.7);
  std::vector<double> g(25), shifted(25);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = testing::uniform(rng, -2, 2);
    shifted[i] = g[i] + 500.0;
  }
  const RiskSetIndex index(y);
  CHECK(std::abs(cox_loss(g, y, index).loss - cox_loss(shifted, y, index).loss) < 1e-9);
}

TEST_CASE("Cox gradient matches central differences") {
  auto rng = make_rng(3, "cox-fd");
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 20;
    auto y = random_outcomes(rng, n, 0.5);
    y[0].event = true;
    std::vector<double> g(n);
    for (auto& s : g) s = testing::uniform(rng, -2, 2);
    const RiskSetIndex index(y);
    const auto loss = cox_loss(g, y, index);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      auto up = g, down = g;
      up[i] += 1e-6;
      down[i] -= 1e-6;
      const double numeric = (cox_loss(up, y, index).loss - cox_loss(down, y, index).loss) / 2e-6;
      CHECK(std::abs(numeric - loss.gradient[i]) < 1e-7);
      sum += loss.gradient[i];
    }
    CHECK(std::abs(sum) < 1e-12);
  }
}

TEST_CASE("risk sets are suffixes of the time order") {
  auto rng = make_rng(4, "risk-set");
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 25;
    const auto y = random_outcomes(rng, n, 0.5);
    const RiskSetIndex index(y);
    const auto& order = index.order();
    for (std::size_t i = 1; i < n; ++i) CHECK(y[order[i - 1]].time <= y[order[i]].time);
    for (std::size_t p = 0; p < n; ++p) {
      std::set<std::size_t> expected;
      for (std::size_t m = 0; m < n; ++m)
        if (y[m].time >= y[p].time) expected.insert(m);
      const auto rs = index.risk_set(p);
      CHECK(std::set<std::size_t>(rs.begin(), rs.end()) == expected);
      CHECK(std::equal(rs.begin(), rs.end(), order.begin() + static_cast<std::ptrdiff_t>(index.risk_set_begin(p))));
      CHECK(index.risk_set_begin(p) + rs.size() == n);
    }
  }
}

TEST_CASE("relative death risk") {
  const std::vector<double> g{0.0, std::log(3.0), 5.0};
  const std::vector<std::size_t> rs{0, 1};
  CHECK(relative_death_risk(g, rs, 0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(relative_death_risk(g, rs, 1) == doctest::Approx(0.75).epsilon(1e-14));
  CHECK_THROWS_AS(relative_death_risk(g, rs, 2), ValidationError);
}

TEST_CASE("memory bank initialization and access") {
  std::vector<std::string> ids;
  for (int i = 0; i < 500; ++i) ids.push_back("id" + std::to_string(i));
  MemoryBank bank(ids, 42);
  CHECK(bank.size() == 500);
  for (double v : bank.values()) CHECK((v >= 0.0 && v < 1.0));
  CHECK(MemoryBank(ids, 42).values() == bank.values());
  CHECK(MemoryBank(ids, 43).values() != bank.values());
  bank.set("id7", -2.5);
  CHECK(bank.get("id7") == -2.5);
  CHECK(bank.at(7) == -2.5);
  CHECK_THROWS_AS(bank.get("nobody"), ValidationError);
  CHECK_THROWS_AS(bank.set_at(3, NAN), ValidationError);
  CHECK_THROWS_AS(MemoryBank({"a", "b", "a"}, 1), ValidationError);
}

TEST_CASE("memory bank loss has zero gradient off the live batch") {
  auto rng = make_rng(5, "bank-loss");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng() % 30;
    auto y = random_outcomes(rng, n, 0.4);
    y[0].event = true;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(std::to_string(i));
    MemoryBank bank(ids, rng());
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < n; ++i)
      if (uniform01(rng) < 0.3) live.push_back(i);
    const RiskSetIndex index(y);
    const auto loss = memory_bank_loss(bank, live, y, index);
    const auto full = cox_loss(bank.values(), y, index);
    CHECK(loss.loss == full.loss);
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(live.begin(), live.end(), i) != live.end())
        CHECK(loss.gradient[i] == full.gradient[i]);
      else
        CHECK(loss.gradient[i] == 0.0);
    }
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(c.lr_at(1) == kLearningRateSingleModality);
  CHECK(c.lr_at(30) == kLearningRateSingleModality);
  CHECK(c.lr_at(31) == doctest::Approx(kLearningRateSingleModality * 0.1).epsilon(1e-15));
  CHECK(c.lr_at(100) == c.lr_at(31));
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("memory bank at full batch equals conventional training bit for bit") {
  const auto f = make_fixture(40, 0.5, 1);
  for (auto mode : {TrainingImputation::sample, TrainingImputation::map}) {
    auto cfg = small_config(40);
    cfg.imputation = mode;
    const RiskModel init(f.encoder.width(), Architecture::mlp({4}), 3);
    const auto bank = train(f.cohort, f.imputer, f.encoder, init, cfg);
    const auto plain = train_without_bank(f.cohort, f.imputer, f.encoder, init, cfg);
    CHECK(bank.model.flat_parameters() == plain.model.flat_parameters());
    REQUIRE(bank.log.size() == plain.log.size());
    for (std::size_t e = 0; e < bank.log.size(); ++e) CHECK(bank.log[e].fresh_loss == plain.log[e].fresh_loss);
  }
}

TEST_CASE("conventional minibatches skip death-free batches and the bank never does") {
  const auto f = make_fixture(60, 4.0, 2);
  const auto cfg = small_config(4);
  const RiskModel init(f.encoder.width(), Architecture::linear(), 3);

  const auto plain = train_without_bank(f.cohort, f.imputer, f.encoder, init, cfg);
  CHECK(plain.total_batches == 6u * 15u);
  CHECK(plain.skipped_batches > 0);
  std::size_t logged = 0;
  for (const auto& e : plain.log) logged += e.skip_count;
  CHECK(logged == plain.skipped_batches);
  CHECK(plain.steps + plain.skipped_batches == plain.total_batches);
  CHECK(plain.max_step_deaths <= 4);

  const auto bank = train(f.cohort, f.imputer, f.encoder, init, cfg);
  CHECK(bank.skipped_batches == 0);
  CHECK(bank.steps == bank.total_batches);
  CHECK(bank.min_step_deaths == bank.training_deaths);
  CHECK(bank.max_step_deaths == bank.training_deaths);
}

TEST_CASE("training is deterministic and reports each step") {
  const auto f = make_fixture(50, 0.5, 3);
  const auto cfg = small_config(16);
  const RiskModel init(f.encoder.width(), Architecture::mlp({5}), 4);
  std::size_t calls = 0;
  const auto a = train(f.cohort, f.imputer, f.encoder, init, cfg, [&](const RiskModel&) { ++calls; });
  const auto b = train(f.cohort, f.imputer, f.encoder, init, cfg);
  CHECK(a.model.flat_parameters() == b.model.flat_parameters());
  CHECK(calls == a.steps);
  CHECK(a.log.size() == 6);
  CHECK(a.log[2].lr == cfg.lr);
  CHECK(a.log[3].lr == doctest::Approx(cfg.lr * 0.1));

  auto other = cfg;
  other.seed = 12;
  CHECK(train(f.cohort, f.imputer, f.encoder, init, other).model.flat_parameters() != a.model.flat_parameters());
}

TEST_CASE("training lowers the loss on an informative cohort") {
  const auto f = make_fixture(200, 0.5, 4);
  auto cfg = small_config(16);
  cfg.epochs = 20;
  const auto r = train(f.cohort, f.imputer, f.encoder, RiskModel(f.encoder.width(), Architecture::linear(), 5), cfg);
  CHECK(r.log.back().fresh_loss < r.log.front().fresh_loss);
}

TEST_CASE("training rejects unusable inputs") {
  auto f = make_fixture(20, 0.5, 5);
  const auto cfg = small_config(4);
  CHECK_THROWS_AS(train(f.cohort, f.imputer, f.encoder, RiskModel(f.encoder.width() + 1, Architecture::linear(), 1), cfg),
                  ValidationError);
  for (auto& o : *f.cohort.outcomes) o.event = false;
  const RiskModel init(f.encoder.width(), Architecture::linear(), 1);
  CHECK_THROWS_AS(train(f.cohort, f.imputer, f.encoder, init, cfg), AllCensoredError);
  CHECK_THROWS_AS(train_without_bank(f.cohort, f.imputer, f.encoder, init, cfg), AllCensoredError);
}

TEST_CASE("epoch log serializes") {
  const auto j = to_json(EpochLog{3, 0.01, 1.5, 2});
  CHECK(j.at("epoch") == 3);
  CHECK(j.at("skip_count") == 2);
  CHECK(j.at("fresh_loss") == 1.5);
}
