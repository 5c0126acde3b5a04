#include "mbsurv/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace mbsurv {

namespace {

std::string kind_name(FeatureKind kind) {
  return kind == FeatureKind::categorical ? "categorical" : "continuous";
}

[[noreturn]] void row_error(std::size_t line, const std::string& what) {
  throw ValidationError("line " + std::to_string(line) + ": " + what);
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else {
      cell += c;
    }
  }
  if (quoted) row_error(line_no, "unterminated quoted field");
  cells.push_back(std::move(cell));
  return cells;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::optional<double> parse_number(const std::string& text) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = first + text.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last) return std::nullopt;
  return value;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

template <class Cohort>
void validate_common(const Cohort& cohort) {
  std::unordered_set<std::string> ids;
  for (std::size_t n = 0; n < cohort.records.size(); ++n) {
    const auto& id = cohort.records[n].patient_id;
    if (!ids.insert(id).second) throw ValidationError("duplicate patient_id '" + id + "'");
  }
  if (cohort.outcomes) {
    if (cohort.outcomes->size() != cohort.records.size())
      throw ValidationError("outcomes do not align with records");
    for (std::size_t n = 0; n < cohort.outcomes->size(); ++n) {
      const double t = (*cohort.outcomes)[n].time;
      if (!std::isfinite(t) || t < 0.0)
        throw ValidationError("patient '" + cohort.records[n].patient_id +
                              "': survival time must be finite and nonnegative");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- schema

FeatureSchema::FeatureSchema(std::vector<FeatureSpec> features,
                             std::vector<std::size_t> always_observed)
    : features_(std::move(features)), always_observed_(std::move(always_observed)) {
  std::unordered_set<std::string> names;
  for (const auto& f : features_) {
    if (f.name.empty()) throw ValidationError("feature name must not be empty");
    if (f.name == "patient_id" || f.name == "time" || f.name == "event")
      throw ValidationError("feature name '" + f.name + "' is reserved");
    if (!names.insert(f.name).second) throw ValidationError("duplicate feature name '" + f.name + "'");
    if (f.kind == FeatureKind::categorical) {
      if (f.categories.size() < 2)
        throw ValidationError("feature '" + f.name + "' needs at least 2 categories");
      std::unordered_set<std::string> labels(f.categories.begin(), f.categories.end());
      if (labels.size() != f.categories.size())
        throw ValidationError("feature '" + f.name + "' has duplicate category labels");
    } else if (f.bin_count < 2) {
      throw ValidationError("feature '" + f.name + "' needs bin_count >= 2");
    }
  }
  std::sort(always_observed_.begin(), always_observed_.end());
  always_observed_.erase(std::unique(always_observed_.begin(), always_observed_.end()),
                         always_observed_.end());
  for (auto k : always_observed_)
    if (k >= features_.size())
      throw ValidationError("always_observed index " + std::to_string(k) + " out of range");
}

bool FeatureSchema::is_always_observed(std::size_t k) const {
  return std::binary_search(always_observed_.begin(), always_observed_.end(), k);
}

std::vector<std::size_t> FeatureSchema::maskable() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < features_.size(); ++k)
    if (!is_always_observed(k)) out.push_back(k);
  return out;
}

std::optional<std::size_t> FeatureSchema::index_of(std::string_view name) const {
  for (std::size_t k = 0; k < features_.size(); ++k)
    if (features_[k].name == name) return k;
  return std::nullopt;
}

std::optional<int> FeatureSchema::category_index(std::size_t k, std::string_view label) const {
  const auto& cats = features_.at(k).categories;
  for (std::size_t c = 0; c < cats.size(); ++c)
    if (cats[c] == label) return static_cast<int>(c);
  return std::nullopt;
}

std::string FeatureSchema::fingerprint() const {
  std::string canonical;
  for (const auto& f : features_) {
    canonical += f.name + '|' + kind_name(f.kind) + '|';
    if (f.kind == FeatureKind::categorical) {
      for (const auto& c : f.categories) canonical += c + ';';
    } else {
      canonical += std::to_string(f.bin_count);
    }
    canonical += '\n';
  }
  for (auto k : always_observed_) canonical += std::to_string(k) + ',';
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

json FeatureSchema::to_json() const {
  json features = json::array();
  for (const auto& f : features_) {
    json jf{{"name", f.name}, {"kind", kind_name(f.kind)}};
    if (f.kind == FeatureKind::categorical)
      jf["categories"] = f.categories;
    else
      jf["bin_count"] = f.bin_count;
    features.push_back(std::move(jf));
  }
  json observed = json::array();
  for (auto k : always_observed_) observed.push_back(features_[k].name);
  return {{"features", std::move(features)}, {"always_observed", std::move(observed)}};
}

FeatureSchema FeatureSchema::from_json(const json& j) {
  try {
    std::vector<FeatureSpec> features;
    for (const auto& jf : j.at("features")) {
      FeatureSpec f;
      f.name = jf.at("name").get<std::string>();
      const auto kind = jf.at("kind").get<std::string>();
      if (kind == "categorical") {
        f.kind = FeatureKind::categorical;
        f.categories = jf.at("categories").get<std::vector<std::string>>();
      } else if (kind == "continuous") {
        f.kind = FeatureKind::continuous;
        f.bin_count = jf.value("bin_count", kDefaultBinCount);
      } else {
        throw ValidationError("feature '" + f.name + "': unknown kind '" + kind + "'");
      }
      features.push_back(std::move(f));
    }
    std::vector<std::size_t> observed;
    if (j.contains("always_observed")) {
      for (const auto& name : j.at("always_observed")) {
        const auto label = name.get<std::string>();
        auto it = std::find_if(features.begin(), features.end(),
                               [&](const FeatureSpec& f) { return f.name == label; });
        if (it == features.end())
          throw ValidationError("always_observed names unknown feature '" + label + "'");
        observed.push_back(static_cast<std::size_t>(it - features.begin()));
      }
    }
    return FeatureSchema(std::move(features), std::move(observed));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed schema JSON: ") + e.what());
  }
}

FeatureSchema load_schema(const std::string& path) {
  return FeatureSchema::from_json(read_json_file(path));
}

// ---------------------------------------------------------------- binning

int BinningEntry::bin_of(double value) const {
  return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), value) - edges.begin());
}

BinningEntry fit_binning(std::span<const double> values, int bin_count,
                         std::string_view feature_name) {
  const std::string label = feature_name.empty() ? "<unnamed>" : std::string(feature_name);
  if (values.empty()) throw ValidationError("feature '" + label + "': no observed values to bin");
  if (bin_count < 2) throw ValidationError("feature '" + label + "': bin_count must be >= 2");

  std::vector<double> sorted(values.begin(), values.end());
  for (double v : sorted)
    if (!std::isfinite(v)) throw ValidationError("feature '" + label + "': non-finite value");
  std::sort(sorted.begin(), sorted.end());

  // distinct values and the count of values <= each of them
  std::vector<double> distinct;
  std::vector<std::size_t> cumulative;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (distinct.empty() || sorted[i] != distinct.back()) {
      distinct.push_back(sorted[i]);
      cumulative.push_back(0);
    }
    cumulative.back() = i + 1;
  }
  const auto b = static_cast<std::size_t>(bin_count);
  if (distinct.size() < b)
    throw ValidationError("feature '" + label + "': " + std::to_string(distinct.size()) +
                          " distinct values, fewer than bin_count " + std::to_string(bin_count));

  const std::size_t n = sorted.size();
  const std::size_t groups = distinct.size();
  BinningEntry entry;
  // cut after group j separates distinct[j] from distinct[j + 1]
  std::ptrdiff_t prev = -1;
  for (std::size_t k = 1; k < b; ++k) {
    const std::size_t target = (2 * k * n + b) / (2 * b);
    std::size_t j = static_cast<std::size_t>(
        std::lower_bound(cumulative.begin(), cumulative.end(), target) - cumulative.begin());
    const std::size_t lo = static_cast<std::size_t>(prev + 1);
    const std::size_t hi = groups - 1 - (b - k);  // leave room for the remaining cuts
    j = std::clamp(j, lo, hi);
    entry.edges.push_back(distinct[j] + (distinct[j + 1] - distinct[j]) / 2.0);
    prev = static_cast<std::ptrdiff_t>(j);
  }

  std::vector<double> sums(b, 0.0);
  std::vector<std::size_t> counts(b, 0);
  for (double v : sorted) {
    const auto bin = static_cast<std::size_t>(entry.bin_of(v));
    sums[bin] += v;
    ++counts[bin];
  }
  for (std::size_t i = 0; i < b; ++i) entry.representatives.push_back(sums[i] / counts[i]);
  return entry;
}

const BinningEntry& BinningSpec::at(std::size_t k) const {
  if (k >= entries.size() || !entries[k])
    throw ValidationError("no binning for feature index " + std::to_string(k));
  return *entries[k];
}

json BinningSpec::to_json() const {
  json out = json::array();
  for (const auto& e : entries) {
    if (e)
      out.push_back({{"edges", e->edges}, {"representatives", e->representatives}});
    else
      out.push_back(nullptr);
  }
  return out;
}

BinningSpec BinningSpec::from_json(const json& j) {
  BinningSpec spec;
  for (const auto& e : j) {
    if (e.is_null()) {
      spec.entries.emplace_back();
    } else {
      BinningEntry entry{e.at("edges").get<std::vector<double>>(),
                         e.at("representatives").get<std::vector<double>>()};
      if (entry.representatives.size() != entry.edges.size() + 1)
        throw ValidationError("binning entry: representatives must be edges + 1");
      spec.entries.emplace_back(std::move(entry));
    }
  }
  return spec;
}

BinningSpec fit_binning_spec(const RawCohort& cohort, std::span<const std::size_t> rows) {
  BinningSpec spec;
  spec.entries.resize(cohort.schema.size());
  for (std::size_t k = 0; k < cohort.schema.size(); ++k) {
    const auto& f = cohort.schema[k];
    if (!f.is_continuous()) continue;
    std::vector<double> values;
    for (auto r : rows)
      if (const auto& v = cohort.records.at(r).values.at(k)) values.push_back(*v);
    spec.entries[k] = fit_binning(values, f.bin_count, f.name);
  }
  return spec;
}

BinningSpec fit_binning_spec(const RawCohort& cohort) {
  std::vector<std::size_t> rows(cohort.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return fit_binning_spec(cohort, rows);
}

// ---------------------------------------------------------------- records

bool ClinicalRecord::complete() const {
  return std::all_of(states.begin(), states.end(), [](const auto& s) { return s.has_value(); });
}

std::size_t ClinicalRecord::missing_count() const {
  return static_cast<std::size_t>(
      std::count_if(states.begin(), states.end(), [](const auto& s) { return !s; }));
}

std::vector<std::size_t> ClinicalRecord::missing_features() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < states.size(); ++k)
    if (!states[k]) out.push_back(k);
  return out;
}

void validate(const Cohort& cohort) {
  const auto& schema = cohort.schema;
  for (const auto& r : cohort.records) {
    if (r.states.size() != schema.size())
      throw ValidationError("patient '" + r.patient_id + "': wrong number of features");
    for (std::size_t k = 0; k < schema.size(); ++k) {
      if (r.states[k]) {
        if (*r.states[k] < 0 || *r.states[k] >= schema.cardinality(k))
          throw ValidationError("patient '" + r.patient_id + "': state of '" + schema[k].name +
                                "' out of range");
      } else if (schema.is_always_observed(k)) {
        throw ValidationError("patient '" + r.patient_id + "': always-observed feature '" +
                              schema[k].name + "' is missing");
      }
    }
  }
  validate_common(cohort);
}

void validate(const RawCohort& cohort) {
  const auto& schema = cohort.schema;
  for (const auto& r : cohort.records) {
    if (r.values.size() != schema.size())
      throw ValidationError("patient '" + r.patient_id + "': wrong number of features");
    for (std::size_t k = 0; k < schema.size(); ++k) {
      if (!r.values[k]) {
        if (schema.is_always_observed(k))
          throw ValidationError("patient '" + r.patient_id + "': always-observed feature '" +
                                schema[k].name + "' is missing");
        continue;
      }
      const double v = *r.values[k];
      if (!std::isfinite(v))
        throw ValidationError("patient '" + r.patient_id + "': non-finite value for '" +
                              schema[k].name + "'");
      if (!schema[k].is_continuous() &&
          (v != std::floor(v) || v < 0 || v >= schema.cardinality(k)))
        throw ValidationError("patient '" + r.patient_id + "': category of '" + schema[k].name +
                              "' out of range");
    }
  }
  validate_common(cohort);
}

ClinicalRecord discretize(const RawRecord& record, const FeatureSchema& schema,
                          const BinningSpec& binning) {
  if (record.values.size() != schema.size())
    throw ValidationError("patient '" + record.patient_id + "': wrong number of features");
  ClinicalRecord out{record.patient_id, std::vector<std::optional<int>>(schema.size())};
  for (std::size_t k = 0; k < schema.size(); ++k) {
    const auto& v = record.values[k];
    if (!v) continue;
    if (!std::isfinite(*v))
      throw ValidationError("patient '" + record.patient_id + "': non-finite value for '" +
                            schema[k].name + "'");
    if (schema[k].is_continuous()) {
      out.states[k] = binning.at(k).bin_of(*v);
    } else {
      const double c = *v;
      if (c != std::floor(c) || c < 0 || c >= schema.cardinality(k))
        throw ValidationError("schema violation: patient '" + record.patient_id +
                              "' has category " + format_double(c) + " for '" + schema[k].name +
                              "' with " + std::to_string(schema.cardinality(k)) + " categories");
      out.states[k] = static_cast<int>(c);
    }
  }
  return out;
}

Cohort discretize(const RawCohort& cohort, const BinningSpec& binning) {
  Cohort out{cohort.schema, {}, cohort.outcomes};
  out.records.reserve(cohort.size());
  for (const auto& r : cohort.records) out.records.push_back(discretize(r, cohort.schema, binning));
  return out;
}

RawRecord to_raw(const ClinicalRecord& record, const FeatureSchema& schema,
                 const BinningSpec& binning) {
  RawRecord out{record.patient_id, std::vector<std::optional<double>>(schema.size())};
  for (std::size_t k = 0; k < schema.size(); ++k) {
    if (!record.states[k]) continue;
    const int s = *record.states[k];
    out.values[k] = schema[k].is_continuous()
                        ? binning.at(k).representatives.at(static_cast<std::size_t>(s))
                        : static_cast<double>(s);
  }
  return out;
}

// ---------------------------------------------------------------- CSV

RawCohort parse_cohort_csv(std::istream& in, const FeatureSchema& schema) {
  std::string line;
  std::size_t line_no = 0;
  // header
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!trim(line).empty()) break;
  }
  if (trim(line).empty()) throw ValidationError("cohort CSV is empty");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

  const auto header = split_csv_line(line, line_no);
  std::optional<std::size_t> id_col, time_col, event_col;
  std::vector<std::optional<std::size_t>> feature_col(schema.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = trim(header[c]);
    if (name == "patient_id") {
      id_col = c;
    } else if (name == "time") {
      time_col = c;
    } else if (name == "event") {
      event_col = c;
    } else if (auto k = schema.index_of(name)) {
      if (feature_col[*k]) row_error(line_no, "duplicate column '" + name + "'");
      feature_col[*k] = c;
    }
  }
  if (!id_col) row_error(line_no, "missing required column 'patient_id'");
  for (std::size_t k = 0; k < schema.size(); ++k)
    if (!feature_col[k]) row_error(line_no, "missing column for feature '" + schema[k].name + "'");
  if (time_col.has_value() != event_col.has_value())
    row_error(line_no, "columns 'time' and 'event' must appear together");

  RawCohort cohort{schema, {}, std::nullopt};
  if (time_col) cohort.outcomes.emplace();
  std::unordered_map<std::string, std::size_t> seen;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line, line_no);
    if (cells.size() != header.size())
      row_error(line_no, "expected " + std::to_string(header.size()) + " fields, found " +
                             std::to_string(cells.size()));

    RawRecord record;
    record.patient_id = trim(cells[*id_col]);
    if (record.patient_id.empty()) row_error(line_no, "empty patient_id");
    if (auto [it, inserted] = seen.emplace(record.patient_id, line_no); !inserted)
      row_error(line_no, "duplicate patient_id '" + record.patient_id + "' (first seen on line " +
                             std::to_string(it->second) + ")");

    record.values.resize(schema.size());
    for (std::size_t k = 0; k < schema.size(); ++k) {
      const auto cell = trim(cells[*feature_col[k]]);
      if (cell.empty()) {
        if (schema.is_always_observed(k))
          row_error(line_no, "always-observed feature '" + schema[k].name + "' is empty");
        continue;
      }
      if (schema[k].is_continuous()) {
        const auto v = parse_number(cell);
        if (!v || !std::isfinite(*v))
          row_error(line_no, "feature '" + schema[k].name + "': invalid number '" + cell + "'");
        record.values[k] = *v;
      } else {
        const auto c = schema.category_index(k, cell);
        if (!c) row_error(line_no, "feature '" + schema[k].name + "': unknown category '" + cell + "'");
        record.values[k] = static_cast<double>(*c);
      }
    }

    if (time_col) {
      const auto t = parse_number(trim(cells[*time_col]));
      if (!t || !std::isfinite(*t) || *t < 0.0)
        row_error(line_no, "time must be a finite nonnegative number, got '" +
                               trim(cells[*time_col]) + "'");
      const auto e = trim(cells[*event_col]);
      if (e != "0" && e != "1") row_error(line_no, "event must be 0 or 1, got '" + e + "'");
      cohort.outcomes->push_back({*t, e == "1"});
    }
    cohort.records.push_back(std::move(record));
  }
  return cohort;
}

RawCohort load_cohort(const std::string& path, const FeatureSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open cohort file '" + path + "'");
  try {
    return parse_cohort_csv(in, schema);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

void write_cohort_csv(std::ostream& out, const RawCohort& cohort) {
  const auto& schema = cohort.schema;
  out << "patient_id";
  for (const auto& f : schema.features()) out << ',' << csv_escape(f.name);
  if (cohort.outcomes) out << ",time,event";
  out << '\n';
  for (std::size_t n = 0; n < cohort.size(); ++n) {
    const auto& r = cohort.records[n];
    out << csv_escape(r.patient_id);
    for (std::size_t k = 0; k < schema.size(); ++k) {
      out << ',';
      if (!r.values[k]) continue;
      if (schema[k].is_continuous())
        out << format_double(*r.values[k]);
      else
        out << csv_escape(schema[k].categories.at(static_cast<std::size_t>(*r.values[k])));
    }
    if (cohort.outcomes) {
      const auto& o = (*cohort.outcomes)[n];
      out << ',' << format_double(o.time) << ',' << (o.event ? 1 : 0);
    }
    out << '\n';
  }
}

void save_cohort_csv(const std::string& path, const RawCohort& cohort) {
  std::ostringstream os;
  write_cohort_csv(os, cohort);
  write_text_file(path, os.str());
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
}

void write_text_file(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace mbsurv
