#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "evseq/preprocess.hpp"
#include "evseq/synth.hpp"

using namespace evseq;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "evseq_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::vector<uint64_t> iota_ids(size_t n) {
  std::vector<uint64_t> ids(n);
  for (size_t i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

int m_index(const DatasetConfig& config, const std::string& name) {
  for (size_t i = 0; i < config.measurements.size(); ++i)
    if (config.measurements[i].name == name) return static_cast<int>(i);
  REQUIRE_MESSAGE(false, "no measurement named " << name);
  return -1;
}

// Three all-train subjects with hand-placed observations; every fit artifact
// below is checkable by hand.
DatasetConfig tiny_config() {
  OracleSpec spec = parse_oracle_spec(R"(
n_subjects: 3
seed: 5
events_per_subject: 2
measurements:
  - {name: sex, kind: categorical, static: true, keys: {F: 1, M: 1}}
  - name: lab
    kind: multivariate
    values:
      hr: {mean: 80, stddev: 10}
      temp: {mean: 37, stddev: 0.5}
  - {name: dx, kind: categorical}
  - {name: reading, kind: univariate, value: {mean: 5, stddev: 2}}
event_types:
  - name: visit
    transitions: {visit: 0.5, admission: 0.5}
    menu:
      - {measurement: dx, keys: {flu: 1, cold: 1}}
  - name: admission
    transitions: {visit: 1}
dataset:
  functional_features: [age, time_of_day]
  split_fractions: [1, 0, 0]
  min_frequency: 2
)");
  return paired_dataset_config(spec);
}

InternalDataModel tiny_model(const DatasetConfig& config) {
  const int sex = m_index(config, "sex"), dob = m_index(config, "dob");
  const int lab = m_index(config, "lab"), dx = m_index(config, "dx");
  const int reading = m_index(config, "reading");

  InternalDataModel m;
  for (const auto& mc : config.measurements) m.measurement_names.push_back(mc.name);

  const char* sexes[] = {"F", "F", "M"};
  for (uint64_t s = 0; s < 3; ++s) {
    Subject subj;
    subj.id = s;
    subj.raw_id = std::to_string(s);
    StaticObs d;
    d.measurement = dob;
    d.value = static_cast<double>(s) * 1000.0;
    d.has_value = true;
    subj.statics.push_back(d);
    StaticObs k;
    k.measurement = sex;
    k.key = sexes[s];
    subj.statics.push_back(k);
    m.subjects.push_back(subj);
  }

  auto event = [&](int64_t id, uint64_t subj, double t, const char* type) {
    Event e;
    e.id = id;
    e.subject_id = subj;
    e.time = t;
    e.type = type;
    m.events.push_back(e);
  };
  event(0, 0, 0.0, "visit");
  event(1, 0, 60.0, "admission");
  event(2, 1, 360.0, "visit");
  event(3, 2, 720.0, "visit");

  auto row = [&](int64_t id, int64_t ev, int meas, const char* key, double value, bool has) {
    MeasurementRow r;
    r.id = id;
    r.event_id = ev;
    r.measurement = meas;
    r.key = key;
    r.value = has ? value : kAbsent;
    r.has_value = has;
    m.measurements.push_back(r);
  };
  row(0, 0, reading, "", 1.0, true);
  row(1, 0, lab, "hr", 10.0, true);
  row(2, 0, dx, "flu", 0, false);
  row(3, 1, reading, "", 2.0, true);
  row(4, 1, lab, "hr", 10.0, true);
  row(5, 1, dx, "flu", 0, false);
  row(6, 2, reading, "", 3.0, true);
  row(7, 2, lab, "temp", 50.0, true);
  row(8, 3, dx, "cold", 0, false);
  return m;
}

const double kStd123 = std::sqrt(2.0 / 3.0);  // population stddev of {1,2,3}

}  // namespace

TEST_CASE("hash split realizes pinned fractions deterministically") {
  auto ids = iota_ids(10);
  SplitAssignment a = split_subjects(ids, {0.8, 0.1, 0.1}, 7);
  CHECK(a.counts() == std::array<size_t, 3>{8, 1, 1});
  CHECK(a == split_subjects(ids, {0.8, 0.1, 0.1}, 7));

  SplitAssignment all = split_subjects(ids, {1, 0, 0}, 7);
  CHECK(all.counts() == std::array<size_t, 3>{10, 0, 0});
  for (uint64_t id : ids) CHECK(all.of(id) == Split::Train);

  CHECK(split_subjects({}, {0.8, 0.1, 0.1}, 7).by_subject.empty());
  CHECK_THROWS_AS(a.of(999), Error);
}

TEST_CASE("hash split is permutation-invariant and seed-sensitive") {
  auto ids = iota_ids(1000);
  SplitAssignment a = split_subjects(ids, {0.8, 0.1, 0.1}, 7);
  REQUIRE(a.by_subject.size() == 1000);

  std::vector<uint64_t> reversed(ids.rbegin(), ids.rend());
  CHECK(a == split_subjects(reversed, {0.8, 0.1, 0.1}, 7));

  SplitAssignment b = split_subjects(ids, {0.8, 0.1, 0.1}, 8);
  size_t moved = 0;
  for (uint64_t id : ids)
    if (a.of(id) != b.of(id)) moved++;
  CHECK(moved >= 1);
}

TEST_CASE("vocabulary sorts by count then key with UNK first") {
  Vocabulary v = fit_vocabulary("dx", {{"A", 5}, {"B", 3}, {"C", 1}}, 2);
  CHECK(v.entries == std::vector<std::string>{"UNK", "A", "B"});
  CHECK(v.counts == std::vector<uint64_t>{0, 5, 3});
  CHECK(v.index_of("A") == 1);
  CHECK(v.index_of("B") == 2);
  CHECK(v.index_of("C") == 0);
  CHECK(v.index_of("Z") == 0);
  CHECK(v.size() == 3);

  CHECK(fit_vocabulary("dx", {}, 0).entries == std::vector<std::string>{"UNK"});

  // count ties break lexicographically; threshold is inclusive
  Vocabulary t = fit_vocabulary("dx", {{"b", 3}, {"a", 3}, {"c", 2}}, 2);
  CHECK(t.entries == std::vector<std::string>{"UNK", "a", "b", "c"});
}

TEST_CASE("raising min_frequency never grows a vocabulary") {
  std::map<std::string, uint64_t> counts;
  for (int i = 0; i < 40; ++i) counts["k" + std::to_string(i)] = static_cast<uint64_t>(i % 7);
  int64_t prev = std::numeric_limits<int64_t>::max();
  for (uint64_t mf = 0; mf <= 8; ++mf) {
    int64_t size = fit_vocabulary("m", counts, mf).size();
    CHECK(size <= prev);
    prev = size;
  }
  CHECK(prev == 1);  // everything below threshold leaves just UNK
}

TEST_CASE("numeric stats match hand-computed moments") {
  NumericStats s = fit_numeric_stats("reading", "", {1, 2, 3}, std::nullopt, 5.0);
  CHECK(s.n == 3);
  CHECK(s.mean == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(s.stddev == doctest::Approx(kStd123).epsilon(1e-12));
  CHECK(s.outlier_lo == doctest::Approx(2.0 - 5.0 * kStd123).epsilon(1e-12));
  CHECK(s.outlier_hi == doctest::Approx(2.0 + 5.0 * kStd123).epsilon(1e-12));
  CHECK(s.in_bounds(6.0));
  CHECK_FALSE(s.in_bounds(6.1));

  NumericStats flat = fit_numeric_stats("reading", "", {7, 7, 7}, std::nullopt, 5.0);
  CHECK(flat.mean == 7.0);
  CHECK(flat.stddev == 0.0);
  CHECK(flat.outlier_lo == 7.0);
  CHECK(flat.outlier_hi == 7.0);
}

TEST_CASE("numeric fit censors before moments and counts drops") {
  NumericStats s = fit_numeric_stats("lab", "hr", {-5, 5, 50}, {{0.0, 10.0}}, 5.0);
  CHECK(s.n == 1);
  CHECK(s.n_censored == 2);
  CHECK(s.mean == 5.0);
  CHECK(s.stddev == 0.0);

  double nan = std::numeric_limits<double>::quiet_NaN();
  double inf = std::numeric_limits<double>::infinity();
  NumericStats f = fit_numeric_stats("lab", "hr", {nan, inf, 4.0}, std::nullopt, 5.0);
  CHECK(f.n == 1);
  CHECK(f.n_nonfinite == 2);
  CHECK(f.mean == 4.0);
}

TEST_CASE("normalization round-trips and constant streams pin to zero") {
  NumericStats s = fit_numeric_stats("m", "", {3.5, -2.25, 17.0, 0.125, 9.5}, std::nullopt, 5.0);
  for (double v : {3.5, -2.25, 17.0, 0.125, 9.5, 11.0, -1.0})
    CHECK(s.denormalize(s.normalize(v)) == doctest::Approx(v).epsilon(1e-9));

  NumericStats flat = fit_numeric_stats("m", "", {7, 7}, std::nullopt, 5.0);
  CHECK(flat.normalize(7.0) == 0.0);
  CHECK(flat.normalize(123.0) == 0.0);
  CHECK(flat.denormalize(0.0) == 7.0);
}

TEST_CASE("time buckets and age are pure functions of minutes") {
  REQUIRE(time_of_day_keys() ==
          std::vector<std::string>{"00-06", "06-12", "12-18", "18-24"});
  CHECK(time_of_day_bucket(0) == 0);
  CHECK(time_of_day_bucket(359.9) == 0);
  CHECK(time_of_day_bucket(360) == 1);
  CHECK(time_of_day_bucket(720) == 2);
  CHECK(time_of_day_bucket(1080) == 3);
  CHECK(time_of_day_bucket(1439.9) == 3);
  CHECK(time_of_day_bucket(1440) == 0);       // next day wraps
  CHECK(time_of_day_bucket(1440 + 359) == 0);
  CHECK(time_of_day_bucket(-1) == 3);         // pre-epoch times still bucket

  CHECK(age_years(525960.0, 0.0) == 1.0);
  CHECK(age_years(0.0, -525960.0 * 40) == 40.0);
}

TEST_CASE("fit on an all-train model pins vocabularies and stats") {
  DatasetConfig config = tiny_config();
  InternalDataModel model = tiny_model(config);
  FitArtifacts art = fit_preprocessing(model, config);

  CHECK(art.split.counts() == std::array<size_t, 3>{3, 0, 0});
  CHECK(art.dataset_hash == config_hash(config));

  const Vocabulary* et = art.vocabulary("event_type");
  REQUIRE(et);
  CHECK(et->entries == std::vector<std::string>{"UNK", "visit", "admission"});
  CHECK(et->counts == std::vector<uint64_t>{0, 3, 1});

  const Vocabulary* sex = art.vocabulary("sex");
  REQUIRE(sex);
  CHECK(sex->entries == std::vector<std::string>{"UNK", "F", "M"});

  // min_frequency 2 drops cold (1 occurrence) and temp (1 occurrence)
  const Vocabulary* dx = art.vocabulary("dx");
  REQUIRE(dx);
  CHECK(dx->entries == std::vector<std::string>{"UNK", "flu"});
  const Vocabulary* lab = art.vocabulary("lab");
  REQUIRE(lab);
  CHECK(lab->entries == std::vector<std::string>{"UNK", "hr"});
  CHECK(art.stats("lab", "hr") != nullptr);
  CHECK(art.stats("lab", "temp") == nullptr);

  const Vocabulary* tod = art.vocabulary("time_of_day");
  REQUIRE(tod);
  CHECK(tod->entries == std::vector<std::string>{"UNK", "00-06", "06-12", "12-18"});
  CHECK(tod->counts == std::vector<uint64_t>{0, 2, 1, 1});

  const NumericStats* reading = art.stats("reading");
  REQUIRE(reading);
  CHECK(reading->n == 3);
  CHECK(reading->mean == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(reading->stddev == doctest::Approx(kStd123).epsilon(1e-12));

  const NumericStats* dob = art.stats("dob");
  REQUIRE(dob);
  CHECK(dob->mean == doctest::Approx(1000.0).epsilon(1e-12));

  const NumericStats* age = art.stats("age");
  REQUIRE(age);
  CHECK(age->n == 4);  // one value per training event
}

TEST_CASE("transform maps keys to indices and standardizes values") {
  DatasetConfig config = tiny_config();
  InternalDataModel model = tiny_model(config);
  FitArtifacts art = fit_preprocessing(model, config);

  DropReport report;
  InternalDataModel out = transform(model, config, art, report);
  CHECK(out.transformed);
  CHECK_FALSE(model.transformed);  // input untouched
  CHECK(out.events.size() == model.events.size());
  CHECK(out.measurements.size() == model.measurements.size());

  CHECK(out.events[0].type_index == 1);
  CHECK(out.events[1].type_index == 2);
  CHECK(out.events[0].type == "visit");  // types stay readable

  for (const auto& s : out.subjects)
    for (const auto& o : s.statics) CHECK(o.key.empty());
  CHECK(out.subjects[0].statics[1].key_index == 1);  // F
  CHECK(out.subjects[2].statics[1].key_index == 2);  // M

  // readings 1,2,3 standardize around their own mean; the mean itself → 0
  CHECK(out.measurements[0].value == doctest::Approx(-1.0 / kStd123).epsilon(1e-12));
  CHECK(out.measurements[3].value == 0.0);
  CHECK(out.measurements[6].value == doctest::Approx(1.0 / kStd123).epsilon(1e-12));

  CHECK(out.measurements[1].key_index == 1);  // lab hr
  CHECK(out.measurements[1].value == 0.0);    // constant stream
  CHECK(out.measurements[2].key_index == 1);  // dx flu
  CHECK(out.measurements[8].key_index == 0);  // dx cold fell below min_frequency

  // temp is not in the vocabulary: its value is dropped, the row survives
  const MeasurementRow& temp = out.measurements[7];
  CHECK(temp.key_index == 0);
  CHECK_FALSE(temp.has_value);
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].measurement == "lab");
  CHECK(report.rows[0].key == "temp");
  CHECK(report.rows[0].reason == "unknown_key");
  CHECK(report.total() == 1);
}

TEST_CASE("transform drops out-of-bounds values and reports them") {
  DatasetConfig config = tiny_config();
  FitArtifacts art = fit_preprocessing(tiny_model(config), config);
  for (auto& s : art.numeric_stats)
    if (s.measurement == "reading") s.censor = {{0.0, 10.0}};

  const int reading = m_index(config, "reading"), dx = m_index(config, "dx");
  InternalDataModel probe;
  probe.measurement_names.push_back("x");
  Subject subj;
  subj.id = 9;
  probe.subjects.push_back(subj);
  Event e;
  e.id = 0;
  e.subject_id = 9;
  e.type = "visit";
  probe.events.push_back(e);
  auto row = [&](int64_t id, int meas, const char* key, double value, bool has) {
    MeasurementRow r;
    r.id = id;
    r.event_id = 0;
    r.measurement = meas;
    r.key = key;
    r.value = value;
    r.has_value = has;
    probe.measurements.push_back(r);
  };
  row(0, reading, "", 6.1, true);   // above outlier_hi ≈ 6.0825
  row(1, reading, "", 6.0, true);   // inside
  row(2, reading, "", -5.0, true);  // outside censor bounds
  row(3, reading, "", std::numeric_limits<double>::quiet_NaN(), true);
  row(4, dx, "Z", 0, false);        // unseen key

  DropReport report;
  InternalDataModel out = transform(probe, config, art, report);

  REQUIRE(out.measurements.size() == 2);  // three readings dropped whole
  CHECK(out.measurements[0].id == 1);
  CHECK(out.measurements[0].value == doctest::Approx((6.0 - 2.0) / kStd123).epsilon(1e-12));
  CHECK(out.measurements[1].id == 4);
  CHECK(out.measurements[1].key_index == 0);

  auto count_of = [&](const char* reason) -> uint64_t {
    for (const auto& r : report.rows)
      if (r.measurement == "reading" && r.reason == reason) return r.count;
    return 0;
  };
  CHECK(count_of("outlier") == 1);
  CHECK(count_of("censor") == 1);
  CHECK(count_of("nonfinite") == 1);
  CHECK(report.total() == 3);

  SUBCASE("artifacts fitted under another config are rejected") {
    FitArtifacts stale = art;
    stale.dataset_hash ^= 1;
    DropReport r2;
    CHECK_THROWS_AS(transform(probe, config, stale, r2), Error);
    try {
      transform(probe, config, stale, r2);
    } catch (const Error& err) {
      CHECK(err.kind() == ErrKind::MissingFitArtifact);
    }
  }
}

TEST_CASE("fit refuses transformed models and empty training splits") {
  DatasetConfig config = tiny_config();
  InternalDataModel model = tiny_model(config);

  InternalDataModel cooked = model;
  cooked.transformed = true;
  CHECK_THROWS_AS(fit_preprocessing(cooked, config), Error);

  InternalDataModel empty;
  try {
    fit_preprocessing(empty, config);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::EmptySplit);
  }
}

TEST_CASE("artifacts serialize to json and back") {
  DatasetConfig config = tiny_config();
  FitArtifacts art = fit_preprocessing(tiny_model(config), config);
  for (auto& s : art.numeric_stats)
    if (s.measurement == "reading") s.censor = {{-100.0, 100.0}};

  std::string text = serialize_artifacts(art);
  FitArtifacts back = parse_artifacts(text);
  CHECK(serialize_artifacts(back) == text);
  CHECK(back.split == art.split);
  CHECK(back.dataset_hash == art.dataset_hash);
  REQUIRE(back.vocabularies.size() == art.vocabularies.size());
  for (size_t i = 0; i < art.vocabularies.size(); ++i) {
    CHECK(back.vocabularies[i].entries == art.vocabularies[i].entries);
    CHECK(back.vocabularies[i].counts == art.vocabularies[i].counts);
    CHECK(back.vocabularies[i].lookup == art.vocabularies[i].lookup);
  }
  const NumericStats* reading = back.stats("reading");
  REQUIRE(reading);
  REQUIRE(reading->censor.has_value());
  CHECK(reading->censor->second == 100.0);
  CHECK(back.stats("lab", "hr") != nullptr);

  fs::path dir = scratch_dir("preprocess_json");
  save_artifacts((dir / "preprocessing.json").string(), art);
  CHECK(serialize_artifacts(load_artifacts((dir / "preprocessing.json").string())) == text);

  CHECK_THROWS_AS(parse_artifacts("not json"), Error);
  CHECK_THROWS_AS(parse_artifacts("{\"schema_version\": 2}"), Error);
}

TEST_CASE("refitting ignores non-training subjects entirely") {
  const char* text = R"(
n_subjects: 30
seed: 9
events_per_subject: 6
measurements:
  - {name: site, kind: categorical, static: true, keys: {north: 1, south: 1}}
  - name: lab
    kind: multivariate
    values:
      hr: {mean: 80, stddev: 10}
      temp: {mean: 37, stddev: 0.5}
  - {name: score, kind: univariate, value: {mean: 5, stddev: 2}}
event_types:
  - name: visit
    transitions: {visit: 0.7, lab_day: 0.3}
    menu:
      - {measurement: score, n_per_event: 1}
  - name: lab_day
    transitions: {visit: 1}
    menu:
      - {measurement: lab, n_per_event: 2, keys: {hr: 2, temp: 1}}
dataset:
  functional_features: [age, time_of_day]
  split_fractions: [0.6, 0.2, 0.2]
  min_frequency: 1
)";
  OracleSpec spec = parse_oracle_spec(text);
  fs::path dir = scratch_dir("preprocess_leak");
  sample_dataset(spec, dir.string());
  DatasetConfig config = load_dataset_config((dir / "dataset_config.yaml").string());
  InternalDataModel model =
      compile_internal_model(extract_sources(config, dir.string()), config);

  FitArtifacts art = fit_preprocessing(model, config);
  std::string baseline = serialize_artifacts(art);

  // transforming must not touch the artifacts
  DropReport report;
  transform(model, config, art, report);
  CHECK(serialize_artifacts(art) == baseline);

  // mangling every non-training subject's data must not move a single fit value
  std::map<int64_t, uint64_t> subject_of_event;
  for (const auto& e : model.events) subject_of_event[e.id] = e.subject_id;
  InternalDataModel mangled = model;
  size_t touched = 0;
  for (auto& s : mangled.subjects) {
    if (art.split.of(s.id) == Split::Train) continue;
    for (auto& o : s.statics) {
      if (o.has_value) o.value *= 100;
      if (!o.key.empty()) o.key += "_x";
    }
  }
  for (auto& r : mangled.measurements) {
    if (art.split.of(subject_of_event.at(r.event_id)) == Split::Train) continue;
    if (r.has_value) r.value *= 100;
    if (!r.key.empty()) r.key += "_x";
    touched++;
  }
  REQUIRE(touched > 0);
  CHECK(serialize_artifacts(fit_preprocessing(mangled, config)) == baseline);
}

TEST_CASE("six-thousand-key fixture covers the full vocabulary") {
  // 2 event types + 2 sites + 45 diagnoses + 6000 lab keys + 4 day buckets
  OracleSpec spec;
  spec.n_subjects = 50;
  spec.seed = 11;
  spec.events_per_subject = 60;
  spec.functional_features = {"age", "time_of_day"};
  spec.split_fractions = {0.8, 0.1, 0.1};
  spec.min_frequency = 1;

  OracleMeasurement site;
  site.name = "site";
  site.kind = ValueKind::Categorical;
  site.is_static = true;
  site.keys = {{"siteA", 1.0}, {"siteB", 1.0}};
  spec.measurements.push_back(site);

  OracleMeasurement dx;
  dx.name = "dx";
  dx.kind = ValueKind::Categorical;
  spec.measurements.push_back(dx);

  OracleMeasurement lab;
  lab.name = "lab";
  lab.kind = ValueKind::MultivariateRegression;
  std::vector<std::pair<std::string, double>> lab_keys;
  for (int i = 0; i < 6000; ++i) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "k%04d", i);
    lab.key_values[buf] = {100.0, 10.0};
    lab_keys.emplace_back(buf, 1.0);
  }
  spec.measurements.push_back(lab);

  std::vector<std::pair<std::string, double>> dx_keys;
  for (int i = 0; i < 45; ++i) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "d%02d", i);
    dx_keys.emplace_back(buf, 1.0);
  }
  MenuSpec dx_menu{"dx", 1, dx_keys};
  MenuSpec lab_menu{"lab", 40, lab_keys};
  for (const char* name : {"visit", "admission"}) {
    EventTypeSpec t;
    t.name = name;
    t.transitions = {{"visit", 0.5}, {"admission", 0.5}};
    t.menu = {dx_menu, lab_menu};
    spec.event_types.push_back(t);
  }

  fs::path dir = scratch_dir("preprocess_6053");
  sample_dataset(spec, dir.string());
  DatasetConfig config = load_dataset_config((dir / "dataset_config.yaml").string());
  InternalDataModel model =
      compile_internal_model(extract_sources(config, dir.string()), config);
  FitArtifacts art = fit_preprocessing(model, config);

  CHECK(art.split.counts() == std::array<size_t, 3>{40, 5, 5});

  auto keyed_size = [&](const char* name) -> int64_t {
    const Vocabulary* v = art.vocabulary(name);
    REQUIRE(v);
    return v->size() - 1;
  };
  CHECK(keyed_size("event_type") == 2);
  CHECK(keyed_size("site") == 2);
  CHECK(keyed_size("dx") == 45);
  CHECK(keyed_size("lab") == 6000);
  CHECK(keyed_size("time_of_day") == 4);

  int64_t total = 0;
  for (const auto& v : art.vocabularies) total += v.size() - 1;
  CHECK(total == 6053);

  // per-key stats exist for every lab entry, plus dob and age
  CHECK(art.numeric_stats.size() == 6002);
  for (const auto& v : art.vocabularies)
    for (size_t i = 1; i < v.entries.size(); ++i)
      CHECK(v.lookup.at(v.entries[i]) == static_cast<int64_t>(i));

  DropReport report;
  InternalDataModel out = transform(model, config, art, report);
  CHECK(out.measurements.size() == model.measurements.size());
  for (const auto& r : out.measurements) {
    CHECK(r.key.empty());
    CHECK(r.key_index > 0);  // every drawn key is in the vocabulary
  }
  for (const auto& e : out.events) CHECK(e.type_index > 0);

  fs::path json = dir / "preprocessing.json";
  save_artifacts(json.string(), art);
  FitArtifacts back = load_artifacts(json.string());
  CHECK(back.vocabularies.size() == art.vocabularies.size());
  CHECK(serialize_artifacts(back) == serialize_artifacts(art));

  write_drop_report((dir / "drops.csv").string(), report);
  CHECK(slurp(dir / "drops.csv").rfind("measurement,key,reason,count\n", 0) == 0);
}
