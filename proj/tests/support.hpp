#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mbsurv/data_model.hpp"
#include "mbsurv/diagnostics.hpp"
#include "mbsurv/rng.hpp"

namespace testing {

using namespace mbsurv;

/// Categorical schema with features f0, f1, ... of the given cardinalities.
inline FeatureSchema categorical_schema(const std::vector<int>& cardinalities,
                                        std::vector<std::size_t> always_observed = {}) {
  std::vector<FeatureSpec> specs;
  for (std::size_t k = 0; k < cardinalities.size(); ++k) {
    FeatureSpec f;
    f.name = "f" + std::to_string(k);
    for (int c = 0; c < cardinalities[k]; ++c) f.categories.push_back("c" + std::to_string(c));
    specs.push_back(std::move(f));
  }
  return FeatureSchema(std::move(specs), std::move(always_observed));
}

/// Rows of states; -1 marks a missing entry.
inline Cohort make_cohort(const FeatureSchema& schema, const std::vector<std::vector<int>>& rows) {
  Cohort c{schema, {}, std::nullopt};
  for (std::size_t n = 0; n < rows.size(); ++n) {
    ClinicalRecord r{"p" + std::to_string(n), {}};
    for (int s : rows[n]) r.states.push_back(s < 0 ? std::nullopt : std::optional<int>(s));
    c.records.push_back(std::move(r));
  }
  return c;
}

inline std::vector<SurvivalOutcome> outcomes(const std::vector<double>& times, const std::vector<int>& events) {
  std::vector<SurvivalOutcome> out;
  for (std::size_t i = 0; i < times.size(); ++i) out.push_back({times[i], events[i] != 0});
  return out;
}

/// Swallows library warnings for the lifetime of the guard, counting them.
class WarningCapture {
 public:
  WarningCapture()
      : previous_(set_warning_sink([this](std::string_view m) { messages.emplace_back(m); })) {}
  ~WarningCapture() { set_warning_sink(previous_); }
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  std::vector<std::string> messages;

 private:
  WarningSink previous_;
};

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline int uniform_int(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

}  // namespace testing
