#include "evseq/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "evseq/csv.hpp"

namespace evseq {

namespace {

using json = nlohmann::ordered_json;

constexpr const char* kUnk = "UNK";

}  // namespace

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Tune: return "tune";
    case Split::HeldOut: return "held_out";
  }
  return "?";
}

Split SplitAssignment::of(uint64_t subject) const {
  auto it = by_subject.find(subject);
  if (it == by_subject.end())
    fail(ErrKind::Reference, "subject " + std::to_string(subject) + " has no split assignment");
  return it->second;
}

std::array<size_t, 3> SplitAssignment::counts() const {
  std::array<size_t, 3> c = {0, 0, 0};
  for (const auto& [id, s] : by_subject) c[static_cast<size_t>(s)]++;
  return c;
}

SplitAssignment split_subjects(const std::vector<uint64_t>& subjects,
                               const std::array<double, 3>& fractions, uint64_t seed) {
  SplitAssignment out;
  out.seed = seed;
  const size_t n = subjects.size();

  std::vector<std::pair<uint64_t, uint64_t>> ranked;  // (hash, id)
  ranked.reserve(n);
  for (uint64_t id : subjects) ranked.emplace_back(mix64(seed, id), id);
  std::sort(ranked.begin(), ranked.end());

  // largest-remainder apportionment keeps every count within 1 of its target
  std::array<size_t, 3> want;
  std::array<double, 3> frac;
  size_t assigned = 0;
  for (size_t i = 0; i < 3; ++i) {
    double target = fractions[i] * static_cast<double>(n);
    want[i] = static_cast<size_t>(std::floor(target));
    frac[i] = target - std::floor(target);
    assigned += want[i];
  }
  std::array<size_t, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return frac[a] > frac[b]; });
  for (size_t k = 0; assigned < n; ++k, ++assigned) want[order[k % 3]]++;

  size_t cursor = 0;
  for (size_t s = 0; s < 3; ++s)
    for (size_t k = 0; k < want[s]; ++k, ++cursor)
      out.by_subject[ranked[cursor].second] = static_cast<Split>(s);
  return out;
}

int64_t Vocabulary::index_of(const std::string& key) const {
  auto it = lookup.find(key);
  return it == lookup.end() ? 0 : it->second;
}

Vocabulary fit_vocabulary(const std::string& measurement,
                          const std::map<std::string, uint64_t>& key_counts,
                          uint64_t min_frequency) {
  Vocabulary v;
  v.measurement = measurement;
  std::vector<std::pair<std::string, uint64_t>> kept;
  for (const auto& [key, count] : key_counts)
    if (count >= min_frequency && !key.empty()) kept.emplace_back(key, count);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  v.entries.push_back(kUnk);
  v.counts.push_back(0);
  for (const auto& [key, count] : kept) {
    v.lookup[key] = static_cast<int64_t>(v.entries.size());
    v.entries.push_back(key);
    v.counts.push_back(count);
  }
  return v;
}

double NumericStats::normalize(double v) const { return stddev > 0 ? (v - mean) / stddev : 0.0; }
double NumericStats::denormalize(double z) const { return mean + z * stddev; }

bool NumericStats::in_bounds(double v) const {
  if (censor && (v < censor->first || v > censor->second)) return false;
  return v >= outlier_lo && v <= outlier_hi;
}

NumericStats fit_numeric_stats(const std::string& measurement, const std::string& key,
                               const std::vector<double>& values,
                               std::optional<std::pair<double, double>> censor_bounds,
                               double stddev_cutoff) {
  NumericStats s;
  s.measurement = measurement;
  s.key = key;
  s.censor = censor_bounds;

  double sum = 0;
  std::vector<double> kept;
  kept.reserve(values.size());
  for (double v : values) {
    if (!std::isfinite(v)) {
      s.n_nonfinite++;
      continue;
    }
    if (censor_bounds && (v < censor_bounds->first || v > censor_bounds->second)) {
      s.n_censored++;
      continue;
    }
    kept.push_back(v);
    sum += v;
  }
  s.n = kept.size();
  if (!kept.empty()) {
    s.mean = sum / static_cast<double>(kept.size());
    double ss = 0;
    for (double v : kept) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(kept.size()));
  }
  s.outlier_lo = s.mean - stddev_cutoff * s.stddev;
  s.outlier_hi = s.mean + stddev_cutoff * s.stddev;
  return s;
}

const std::vector<std::string>& time_of_day_keys() {
  static const std::vector<std::string> keys = {"00-06", "06-12", "12-18", "18-24"};
  return keys;
}

int64_t time_of_day_bucket(double minutes) {
  double of_day = std::fmod(minutes, kMinutesPerDay);
  if (of_day < 0) of_day += kMinutesPerDay;
  int64_t bucket = static_cast<int64_t>(of_day / 360.0);
  return std::min<int64_t>(bucket, 3);
}

double age_years(double time_minutes, double dob_minutes) {
  return (time_minutes - dob_minutes) / kMinutesPerYear;
}

const Vocabulary* FitArtifacts::vocabulary(const std::string& measurement) const {
  for (const auto& v : vocabularies)
    if (v.measurement == measurement) return &v;
  return nullptr;
}

const NumericStats* FitArtifacts::stats(const std::string& measurement,
                                        const std::string& key) const {
  for (const auto& s : numeric_stats)
    if (s.measurement == measurement && s.key == key) return &s;
  return nullptr;
}

namespace {

int find_measurement_index(const DatasetConfig& config, const std::string& name) {
  for (size_t i = 0; i < config.measurements.size(); ++i)
    if (config.measurements[i].name == name) return static_cast<int>(i);
  return -1;
}

bool keyed(const MeasurementConfig& m) {
  return m.value_kind == ValueKind::Categorical ||
         m.value_kind == ValueKind::MultivariateRegression;
}

// dob minutes per subject, for the functional age feature
double dob_of(const Subject& subject, int dob_idx) {
  for (const auto& o : subject.statics)
    if (o.measurement == dob_idx && o.has_value) return o.value;
  fail(ErrKind::MissingStatic,
       "subject " + std::to_string(subject.id) + " has no '" + kDobMeasurement +
           "' value, required by the age feature");
}

}  // namespace

FitArtifacts fit_preprocessing(const InternalDataModel& model, const DatasetConfig& config) {
  if (model.transformed) fail(ErrKind::Schema, "fit expects a raw (untransformed) model");

  FitArtifacts art;
  art.dataset_hash = config_hash(config);

  std::vector<uint64_t> ids;
  ids.reserve(model.subjects.size());
  for (const auto& s : model.subjects) ids.push_back(s.id);
  art.split = split_subjects(ids, config.split_fractions, config.seed);
  if (art.split.counts()[0] == 0) fail(ErrKind::EmptySplit, "training split has no subjects");

  const size_t m_count = config.measurements.size();
  std::vector<std::map<std::string, uint64_t>> key_counts(m_count);
  std::vector<std::vector<double>> uni_values(m_count);
  std::vector<std::map<std::string, std::vector<double>>> mv_values(m_count);

  int age_idx = find_measurement_index(config, "age");
  int tod_idx = find_measurement_index(config, "time_of_day");
  int et_idx = find_measurement_index(config, kEventTypeMeasurement);
  int dob_idx = find_measurement_index(config, kDobMeasurement);
  if (age_idx >= 0 && dob_idx < 0)
    fail(ErrKind::MissingStatic,
         std::string("the age feature needs a static '") + kDobMeasurement + "' measurement");

  std::unordered_map<uint64_t, const Subject*> subject_of;
  for (const auto& s : model.subjects) subject_of[s.id] = &s;
  auto in_train = [&](uint64_t subject) { return art.split.of(subject) == Split::Train; };

  for (const auto& s : model.subjects) {
    if (!in_train(s.id)) continue;
    for (const auto& o : s.statics) {
      const MeasurementConfig& m = config.measurements[static_cast<size_t>(o.measurement)];
      if (m.value_kind == ValueKind::Categorical && !o.key.empty())
        key_counts[static_cast<size_t>(o.measurement)][o.key]++;
      else if (m.value_kind == ValueKind::UnivariateRegression && o.has_value)
        uni_values[static_cast<size_t>(o.measurement)].push_back(o.value);
    }
  }

  std::unordered_map<int64_t, uint64_t> event_subject;
  for (const auto& e : model.events) {
    event_subject[e.id] = e.subject_id;
    if (!in_train(e.subject_id)) continue;
    if (et_idx >= 0) key_counts[static_cast<size_t>(et_idx)][e.type]++;
    if (tod_idx >= 0)
      key_counts[static_cast<size_t>(tod_idx)]
                [time_of_day_keys()[static_cast<size_t>(time_of_day_bucket(e.time))]]++;
    if (age_idx >= 0)
      uni_values[static_cast<size_t>(age_idx)].push_back(
          age_years(e.time, dob_of(*subject_of.at(e.subject_id), dob_idx)));
  }

  for (const auto& r : model.measurements) {
    auto it = event_subject.find(r.event_id);
    if (it == event_subject.end())
      fail(ErrKind::Reference, "measurement row " + std::to_string(r.id) + " has no event");
    if (!in_train(it->second)) continue;
    const size_t mi = static_cast<size_t>(r.measurement);
    const MeasurementConfig& m = config.measurements[mi];
    if (keyed(m) && !r.key.empty()) key_counts[mi][r.key]++;
    if (m.value_kind == ValueKind::UnivariateRegression && r.has_value)
      uni_values[mi].push_back(r.value);
    else if (m.value_kind == ValueKind::MultivariateRegression && r.has_value)
      mv_values[mi][r.key].push_back(r.value);
  }

  for (size_t mi = 0; mi < m_count; ++mi) {
    const MeasurementConfig& m = config.measurements[mi];
    if (keyed(m)) art.vocabularies.push_back(fit_vocabulary(m.name, key_counts[mi], m.min_frequency));
    if (m.value_kind == ValueKind::UnivariateRegression)
      art.numeric_stats.push_back(fit_numeric_stats(m.name, "", uni_values[mi], m.censor_bounds,
                                                    config.outlier_stddev_cutoff));
    if (m.value_kind == ValueKind::MultivariateRegression) {
      const Vocabulary& v = art.vocabularies.back();
      for (size_t k = 1; k < v.entries.size(); ++k) {
        auto vit = mv_values[mi].find(v.entries[k]);
        static const std::vector<double> kNone;
        art.numeric_stats.push_back(fit_numeric_stats(m.name, v.entries[k],
                                                      vit == mv_values[mi].end() ? kNone : vit->second,
                                                      m.censor_bounds,
                                                      config.outlier_stddev_cutoff));
      }
    }
  }
  return art;
}

void DropReport::bump(const std::string& measurement, const std::string& key,
                      const std::string& reason) {
  for (auto& r : rows)
    if (r.measurement == measurement && r.key == key && r.reason == reason) {
      r.count++;
      return;
    }
  rows.push_back({measurement, key, reason, 1});
}

uint64_t DropReport::total() const {
  uint64_t t = 0;
  for (const auto& r : rows) t += r.count;
  return t;
}

InternalDataModel transform(const InternalDataModel& model, const DatasetConfig& config,
                            const FitArtifacts& artifacts, DropReport& report) {
  if (model.transformed) fail(ErrKind::Schema, "transform expects a raw model");
  if (artifacts.dataset_hash != config_hash(config))
    fail(ErrKind::MissingFitArtifact, "fit artifacts were produced under a different config");

  auto vocab_for = [&](const std::string& name) -> const Vocabulary& {
    const Vocabulary* v = artifacts.vocabulary(name);
    if (!v) fail(ErrKind::MissingFitArtifact, "no vocabulary for measurement '" + name + "'");
    return *v;
  };
  auto stats_for = [&](const std::string& name, const std::string& key) -> const NumericStats& {
    const NumericStats* s = artifacts.stats(name, key);
    if (!s)
      fail(ErrKind::MissingFitArtifact,
           "no numeric stats for measurement '" + name + (key.empty() ? "'" : "' key '" + key + "'"));
    return *s;
  };
  // nullptr when the value survives, else the drop reason
  auto drop_reason = [](const NumericStats& s, double v) -> const char* {
    if (!std::isfinite(v)) return "nonfinite";
    if (s.censor && (v < s.censor->first || v > s.censor->second)) return "censor";
    if (v < s.outlier_lo || v > s.outlier_hi) return "outlier";
    return nullptr;
  };

  InternalDataModel out;
  out.transformed = true;
  out.measurement_names = model.measurement_names;

  const Vocabulary& et_vocab = vocab_for(kEventTypeMeasurement);

  for (const auto& s : model.subjects) {
    Subject t;
    t.id = s.id;
    t.raw_id = s.raw_id;
    for (const auto& o : s.statics) {
      const MeasurementConfig& m = config.measurements[static_cast<size_t>(o.measurement)];
      StaticObs n = o;
      if (m.value_kind == ValueKind::Categorical) {
        n.key_index = vocab_for(m.name).index_of(o.key);
        n.key.clear();
      } else if (o.has_value) {
        const NumericStats& st = stats_for(m.name, "");
        if (const char* reason = drop_reason(st, o.value)) {
          report.bump(m.name, "", reason);
          continue;
        }
        n.value = st.normalize(o.value);
      } else {
        continue;
      }
      t.statics.push_back(std::move(n));
    }
    out.subjects.push_back(std::move(t));
  }

  out.events = model.events;
  for (auto& e : out.events) e.type_index = et_vocab.index_of(e.type);

  for (const auto& r : model.measurements) {
    const MeasurementConfig& m = config.measurements[static_cast<size_t>(r.measurement)];
    MeasurementRow n = r;
    if (m.value_kind == ValueKind::Categorical) {
      n.key_index = vocab_for(m.name).index_of(r.key);
      n.key.clear();
    } else if (m.value_kind == ValueKind::UnivariateRegression) {
      if (!r.has_value) continue;
      const NumericStats& st = stats_for(m.name, "");
      if (const char* reason = drop_reason(st, r.value)) {
        report.bump(m.name, "", reason);
        continue;
      }
      n.value = st.normalize(r.value);
    } else {
      const Vocabulary& v = vocab_for(m.name);
      n.key_index = v.index_of(r.key);
      n.key.clear();
      if (r.has_value) {
        if (n.key_index == 0) {
          report.bump(m.name, r.key, "unknown_key");
          n.has_value = false;
          n.value = kAbsent;
        } else {
          const NumericStats& st = stats_for(m.name, r.key);
          if (const char* reason = drop_reason(st, r.value)) {
            report.bump(m.name, r.key, reason);
            n.has_value = false;
            n.value = kAbsent;
          } else {
            n.value = st.normalize(r.value);
          }
        }
      }
    }
    out.measurements.push_back(std::move(n));
  }
  return out;
}

std::string serialize_artifacts(const FitArtifacts& artifacts) {
  json doc;
  doc["schema_version"] = 1;
  doc["config_hash"] = hex64(artifacts.dataset_hash);
  doc["seed"] = artifacts.split.seed;

  json splits;
  for (int s = 0; s < 3; ++s) {
    std::vector<uint64_t> members;
    for (const auto& [id, sp] : artifacts.split.by_subject)
      if (sp == static_cast<Split>(s)) members.push_back(id);
    splits[to_string(static_cast<Split>(s))] = members;
  }
  doc["splits"] = splits;

  json vocabs = json::array();
  for (const auto& v : artifacts.vocabularies) {
    json vj;
    vj["measurement"] = v.measurement;
    vj["entries"] = v.entries;
    vj["counts"] = v.counts;
    vocabs.push_back(vj);
  }
  doc["vocabularies"] = vocabs;

  json stats = json::array();
  for (const auto& s : artifacts.numeric_stats) {
    json sj;
    sj["measurement"] = s.measurement;
    sj["key"] = s.key;
    sj["mean"] = s.mean;
    sj["stddev"] = s.stddev;
    sj["outlier_lo"] = s.outlier_lo;
    sj["outlier_hi"] = s.outlier_hi;
    if (s.censor) {
      sj["censor_lo"] = s.censor->first;
      sj["censor_hi"] = s.censor->second;
    }
    sj["n"] = s.n;
    sj["n_censored"] = s.n_censored;
    sj["n_nonfinite"] = s.n_nonfinite;
    stats.push_back(sj);
  }
  doc["numeric_stats"] = stats;
  return doc.dump(2) + "\n";
}

FitArtifacts parse_artifacts(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrKind::Format, std::string("invalid artifacts json: ") + e.what());
  }
  FitArtifacts art;
  try {
    if (doc.at("schema_version").get<int>() != 1)
      fail(ErrKind::Schema, "unsupported artifacts schema version");
    art.dataset_hash = std::strtoull(doc.at("config_hash").get<std::string>().c_str(), nullptr, 16);
    art.split.seed = doc.at("seed").get<uint64_t>();
    for (int s = 0; s < 3; ++s)
      for (uint64_t id : doc.at("splits").at(to_string(static_cast<Split>(s))))
        art.split.by_subject[id] = static_cast<Split>(s);
    for (const auto& vj : doc.at("vocabularies")) {
      Vocabulary v;
      v.measurement = vj.at("measurement").get<std::string>();
      v.entries = vj.at("entries").get<std::vector<std::string>>();
      v.counts = vj.at("counts").get<std::vector<uint64_t>>();
      if (v.entries.empty() || v.entries.size() != v.counts.size())
        fail(ErrKind::Format, "malformed vocabulary for '" + v.measurement + "'");
      for (size_t i = 1; i < v.entries.size(); ++i)
        v.lookup[v.entries[i]] = static_cast<int64_t>(i);
      art.vocabularies.push_back(std::move(v));
    }
    for (const auto& sj : doc.at("numeric_stats")) {
      NumericStats s;
      s.measurement = sj.at("measurement").get<std::string>();
      s.key = sj.at("key").get<std::string>();
      s.mean = sj.at("mean").get<double>();
      s.stddev = sj.at("stddev").get<double>();
      s.outlier_lo = sj.at("outlier_lo").get<double>();
      s.outlier_hi = sj.at("outlier_hi").get<double>();
      if (sj.contains("censor_lo"))
        s.censor = {sj.at("censor_lo").get<double>(), sj.at("censor_hi").get<double>()};
      s.n = sj.at("n").get<uint64_t>();
      s.n_censored = sj.at("n_censored").get<uint64_t>();
      s.n_nonfinite = sj.at("n_nonfinite").get<uint64_t>();
      art.numeric_stats.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    fail(ErrKind::Format, std::string("invalid artifacts json: ") + e.what());
  }
  return art;
}

void save_artifacts(const std::string& path, const FitArtifacts& artifacts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrKind::Io, "cannot write " + path);
  out << serialize_artifacts(artifacts);
}

FitArtifacts load_artifacts(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrKind::Io, "cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_artifacts(text);
}

void write_drop_report(const std::string& path, const DropReport& report) {
  csv::Writer out(path);
  out.write_row({"measurement", "key", "reason", "count"});
  for (const auto& r : report.rows)
    out.write_row({r.measurement, r.key, r.reason, std::to_string(r.count)});
  out.close();
}

}  // namespace evseq
