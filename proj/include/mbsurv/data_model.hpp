#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mbsurv/errors.hpp"

namespace mbsurv {

using json = nlohmann::json;

enum class FeatureKind { categorical, continuous };

/// Default number of equal-frequency bins for a continuous feature.
inline constexpr int kDefaultBinCount = 10;

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::categorical;
  std::vector<std::string> categories;  // categorical only
  int bin_count = kDefaultBinCount;     // continuous only

  int cardinality() const {
    return kind == FeatureKind::categorical ? static_cast<int>(categories.size()) : bin_count;
  }
  bool is_continuous() const { return kind == FeatureKind::continuous; }
};

/// Ordered feature list plus the set of features that are never missing.
/// Validated on construction: unique names, cardinality >= 2, bin_count >= 2,
/// always-observed indices in range.
class FeatureSchema {
 public:
  FeatureSchema() = default;
  FeatureSchema(std::vector<FeatureSpec> features, std::vector<std::size_t> always_observed);

  std::size_t size() const { return features_.size(); }
  const FeatureSpec& operator[](std::size_t k) const { return features_[k]; }
  const std::vector<FeatureSpec>& features() const { return features_; }
  int cardinality(std::size_t k) const { return features_[k].cardinality(); }

  const std::vector<std::size_t>& always_observed() const { return always_observed_; }
  bool is_always_observed(std::size_t k) const;
  /// Features that may be missing (complement of always_observed), ascending.
  std::vector<std::size_t> maskable() const;

  std::optional<std::size_t> index_of(std::string_view name) const;
  std::optional<int> category_index(std::size_t k, std::string_view label) const;

  /// Stable 16-hex-digit digest of names, kinds, categories and bin counts.
  std::string fingerprint() const;

  json to_json() const;
  static FeatureSchema from_json(const json& j);

 private:
  std::vector<FeatureSpec> features_;
  std::vector<std::size_t> always_observed_;
};

FeatureSchema load_schema(const std::string& path);

/// Bin edges and per-bin representative values for one continuous feature.
/// Bin j covers [edges[j-1], edges[j]); the outer bins are unbounded.
struct BinningEntry {
  std::vector<double> edges;
  std::vector<double> representatives;

  int bin_count() const { return static_cast<int>(representatives.size()); }
  int bin_of(double value) const;
};

/// Equal-frequency binning. Edges sit halfway between distinct adjacent sorted
/// values; a run of equal values straddling a cut point goes to the lower bin.
/// Representatives are the mean of the training values in each bin.
BinningEntry fit_binning(std::span<const double> values, int bin_count,
                         std::string_view feature_name = {});

/// One optional entry per schema feature; present exactly for continuous ones.
struct BinningSpec {
  std::vector<std::optional<BinningEntry>> entries;

  const BinningEntry& at(std::size_t k) const;
  json to_json() const;
  static BinningSpec from_json(const json& j);
};

/// Record with raw feature values: categorical entries hold the category index,
/// continuous entries hold the measurement. nullopt = missing.
struct RawRecord {
  std::string patient_id;
  std::vector<std::optional<double>> values;
};

/// Record with every feature as a discrete state (category or bin index).
struct ClinicalRecord {
  std::string patient_id;
  std::vector<std::optional<int>> states;

  bool complete() const;
  std::size_t missing_count() const;
  std::vector<std::size_t> missing_features() const;
};

struct SurvivalOutcome {
  double time = 0.0;  // weeks
  bool event = false; // true = death observed
};

template <class Record>
struct BasicCohort {
  FeatureSchema schema;
  std::vector<Record> records;
  std::optional<std::vector<SurvivalOutcome>> outcomes;

  std::size_t size() const { return records.size(); }
  bool has_outcomes() const { return outcomes.has_value(); }
  std::span<const SurvivalOutcome> outcome_span() const {
    if (!outcomes) throw ValidationError("cohort has no survival outcomes (time/event columns)");
    return *outcomes;
  }

  BasicCohort subset(std::span<const std::size_t> rows) const {
    BasicCohort out{schema, {}, std::nullopt};
    out.records.reserve(rows.size());
    for (auto r : rows) out.records.push_back(records.at(r));
    if (outcomes) {
      out.outcomes.emplace();
      for (auto r : rows) out.outcomes->push_back(outcomes->at(r));
    }
    return out;
  }
};

using RawCohort = BasicCohort<RawRecord>;
using Cohort = BasicCohort<ClinicalRecord>;

/// Throws ValidationError if states are out of range, always-observed features
/// are missing, outcomes are misaligned or invalid, or patient ids repeat.
void validate(const Cohort& cohort);
void validate(const RawCohort& cohort);

/// Fits bins for every continuous feature using the observed values of `rows`.
BinningSpec fit_binning_spec(const RawCohort& cohort, std::span<const std::size_t> rows);
BinningSpec fit_binning_spec(const RawCohort& cohort);

ClinicalRecord discretize(const RawRecord& record, const FeatureSchema& schema,
                          const BinningSpec& binning);
Cohort discretize(const RawCohort& cohort, const BinningSpec& binning);

/// Maps states back to feature units: category index or bin representative.
RawRecord to_raw(const ClinicalRecord& record, const FeatureSchema& schema,
                 const BinningSpec& binning);

/// CSV with a `patient_id` column, one column per feature, and optional
/// `time`/`event` columns. Empty cell = missing. Errors carry the line number.
RawCohort parse_cohort_csv(std::istream& in, const FeatureSchema& schema);
RawCohort load_cohort(const std::string& path, const FeatureSchema& schema);
void write_cohort_csv(std::ostream& out, const RawCohort& cohort);
void save_cohort_csv(const std::string& path, const RawCohort& cohort);

/// Shortest decimal text that round-trips the double.
std::string format_double(double value);

json read_json_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view text);

}  // namespace mbsurv
