#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "evseq/csv.hpp"
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

size_t data_rows(const fs::path& p) {
  std::vector<std::string> header;
  size_t n = 0;
  csv::Reader::for_each_row(p.string(), header,
                            [&](const std::vector<std::string>&, size_t) { ++n; });
  return n;
}

ErrKind spec_error(const std::string& text) {
  try {
    parse_oracle_spec(text);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected parse failure");
  return ErrKind::Io;
}

// Small clinic-flavoured fixture exercising every measurement kind, both TTE
// families, a value rule, and both task kinds.
const char* kClinic = R"(
n_subjects: 30
seed: 11
events_per_subject: 12
start: "2020-01-01T00:00"
dob: {mean_age_years: 50, stddev_years: 12}
measurements:
  - {name: sex, kind: categorical, static: true, keys: {F: 0.5, M: 0.5}}
  - name: lab
    kind: multivariate
    values:
      hr: {mean: 80, stddev: 10}
      temp: {mean: 37, stddev: 0.5}
  - {name: dx, kind: categorical}
  - {name: reading, kind: univariate, value: {mean: 0, stddev: 1}}
event_types:
  - name: visit
    weight: 1
    transitions: {visit: 0.6, admission: 0.4}
    tte: {kind: exponential, mean_minutes: 720}
    menu:
      - {measurement: dx, n_per_event: 2, keys: {flu: 1, cold: 2}}
      - {measurement: lab, n_per_event: 1, keys: {hr: 1, temp: 1}}
  - name: admission
    weight: 1
    transitions: {visit: 0.7, admission: 0.3}
    tte:
      kind: lognormal_mixture
      components:
        - {weight: 0.7, mu: 6.0, sigma: 0.5}
        - {weight: 0.3, mu: 8.0, sigma: 0.3}
    menu:
      - {measurement: lab, n_per_event: 2, keys: {hr: 3, temp: 1}}
rules:
  - trigger: {measurement: dx, key: flu}
    emit_value: {measurement: reading, mean: 2.0, noise_stddev: 0.0}
tasks:
  - name: admit_soon
    kind: event_within_horizon
    anchor_types: [visit]
    target_type: admission
    horizon_minutes: 1440
  - {name: is_f, kind: static_key_equals, measurement: sex, key: F}
dataset:
  functional_features: [age, time_of_day]
  split_fractions: [0.6, 0.2, 0.2]
  min_frequency: 2
)";

}  // namespace

TEST_CASE("exponential tte forms a proper density with the declared mean") {
  TteSpec t;
  t.kind = TteSpec::Kind::Exponential;
  t.mean_minutes = 720;
  CHECK(t.mean() == doctest::Approx(720.0));

  // trapezoid over exp(-nll) must integrate to 1 and to the mean
  double mass = 0, first_moment = 0, prev = 0, prev_pdf = std::exp(-t.nll(1e-6));
  for (double x = 0.5; x <= 40000; x += 0.5) {
    double pdf = std::exp(-t.nll(x));
    mass += 0.25 * (pdf + prev_pdf);
    first_moment += 0.25 * (x * pdf + prev * prev_pdf);
    prev = x;
    prev_pdf = pdf;
  }
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(first_moment == doctest::Approx(720.0).epsilon(1e-2));

  Rng rng(42);
  double acc = 0;
  const int n = 200000;
  int below_median = 0;
  for (int i = 0; i < n; ++i) {
    double d = t.sample(rng);
    acc += d;
    below_median += d < 720.0 * std::log(2.0);
  }
  CHECK(acc / n == doctest::Approx(720.0).epsilon(0.01));
  CHECK(static_cast<double>(below_median) / n == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("lognormal mixture tte density integrates to one and matches sampling") {
  TteSpec t;
  t.kind = TteSpec::Kind::LognormalMixture;
  t.components = {{0.7, 6.0, 0.5}, {0.3, 8.0, 0.3}};
  // mixture of lognormal means, weights normalized
  double expected_mean =
      0.7 * std::exp(6.0 + 0.125) + 0.3 * std::exp(8.0 + 0.045);
  CHECK(t.mean() == doctest::Approx(expected_mean).epsilon(1e-12));

  double mass = 0, prev = 1.0, prev_pdf = std::exp(-t.nll(1.0));
  for (double x = 1.0; x <= 60000; x *= 1.001) {
    double pdf = std::exp(-t.nll(x));
    mass += 0.5 * (x - prev) * (pdf + prev_pdf);
    prev = x;
    prev_pdf = pdf;
  }
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));

  Rng rng(7);
  double acc = 0;
  const int n = 400000;
  for (int i = 0; i < n; ++i) acc += t.sample(rng);
  CHECK(acc / n == doctest::Approx(expected_mean).epsilon(0.02));
}

TEST_CASE("oracle spec parsing applies defaults and rejects malformed documents") {
  OracleSpec spec = parse_oracle_spec(kClinic);
  CHECK(spec.n_subjects == 30);
  CHECK(spec.events_per_subject == 12);
  CHECK(spec.horizon_days == 0);
  CHECK(spec.start_minutes == doctest::Approx(26297280.0));
  CHECK(spec.measurements.size() == 4);
  CHECK(spec.event_types.size() == 2);
  CHECK(spec.rules.size() == 1);
  CHECK(spec.tasks.size() == 2);
  CHECK(spec.min_frequency == 2);
  CHECK(spec.find_measurement("lab")->key_values.at("hr").mean == doctest::Approx(80.0));
  CHECK(spec.tte_of(spec.event_types[0]).mean_minutes == doctest::Approx(720.0));
  CHECK(spec.tte_of(spec.event_types[1]).kind == TteSpec::Kind::LognormalMixture);

  CHECK(spec_error("event_types: []\nevents_per_subject: 3") == ErrKind::Schema);
  CHECK(spec_error("events_per_subject: 3\nevent_types:\n"
                   "  - {name: a, transitions: {a: 0.5}}") == ErrKind::Schema);
  CHECK(spec_error("events_per_subject: 3\nhorizon_days: 2\nevent_types:\n"
                   "  - {name: a, transitions: {a: 1.0}}") == ErrKind::Schema);
  CHECK(spec_error("event_types:\n  - {name: a, transitions: {a: 1.0}}") == ErrKind::Schema);
  CHECK(spec_error("events_per_subject: 3\nbogus: 1\nevent_types:\n"
                   "  - {name: a, transitions: {a: 1.0}}") == ErrKind::Schema);
  CHECK(spec_error("events_per_subject: 3\nevent_types:\n"
                   "  - {name: a, transitions: {b: 1.0}}") == ErrKind::Schema);
  // menu key with no value distribution for a multivariate measurement
  CHECK(spec_error("events_per_subject: 3\n"
                   "measurements:\n"
                   "  - {name: lab, kind: multivariate, values: {hr: {mean: 1}}}\n"
                   "event_types:\n"
                   "  - name: a\n"
                   "    transitions: {a: 1.0}\n"
                   "    menu:\n"
                   "      - {measurement: lab, keys: {bp: 1}}\n") == ErrKind::Schema);
}

TEST_CASE("sampled dataset is deterministic per seed and seed-sensitive") {
  OracleSpec spec = parse_oracle_spec(kClinic);
  fs::path a = scratch_dir("synth_a");
  fs::path b = scratch_dir("synth_b");
  OracleSummary sa = sample_dataset(spec, a.string());
  OracleSummary sb = sample_dataset(spec, b.string());
  CHECK(sa.n_events == sb.n_events);
  size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    fs::path other = b / entry.path().filename();
    REQUIRE(fs::exists(other));
    CHECK(slurp(entry.path()) == slurp(other));
    ++compared;
  }
  CHECK(compared >= 8);  // subjects, events, 3 obs files, config, sidecar, 2 tasks

  OracleSpec other = spec;
  other.seed = 12;
  fs::path c = scratch_dir("synth_c");
  sample_dataset(other, c.string());
  CHECK(slurp(a / "events.csv") != slurp(c / "events.csv"));
}

TEST_CASE("sidecar counts equal emitted file rows") {
  OracleSpec spec = parse_oracle_spec(kClinic);
  fs::path dir = scratch_dir("synth_counts");
  OracleSummary s = sample_dataset(spec, dir.string());

  CHECK(s.n_events == spec.n_subjects * spec.events_per_subject);
  CHECK(data_rows(dir / "subjects.csv") == spec.n_subjects);
  CHECK(data_rows(dir / "events.csv") == s.n_events);
  size_t obs_total = 0;
  for (const auto& [name, n] : s.obs_rows_per_measurement) {
    CHECK(data_rows(dir / ("obs_" + name + ".csv")) == n);
    obs_total += n;
  }
  CHECK(obs_total == s.n_obs_rows);

  nlohmann::json side = nlohmann::json::parse(slurp(dir / "sidecar.json"));
  CHECK(side["n_events"].get<uint64_t>() == s.n_events);
  CHECK(side["n_obs_rows"].get<uint64_t>() == s.n_obs_rows);
  CHECK(side["n_subjects"].get<uint64_t>() == spec.n_subjects);
  uint64_t per_type = 0;
  for (const auto& [name, n] : side["events_per_type"].items()) per_type += n.get<uint64_t>();
  CHECK(per_type == s.n_events);
  CHECK(side["event_types"]["visit"]["tte"]["mean_minutes"].get<double>() ==
        doctest::Approx(720.0));

  for (const auto& [task, rows] : s.task_rows) {
    CHECK(data_rows(dir / (task + ".task.csv")) == rows.first);
    nlohmann::json th = nlohmann::json::parse(slurp(dir / (task + ".task.json")));
    CHECK(th["n_rows"].get<uint64_t>() == rows.first);
    CHECK(th["n_positive"].get<uint64_t>() == rows.second);
  }
}

TEST_CASE("every observation row joins to a recorded event") {
  OracleSpec spec = parse_oracle_spec(kClinic);
  fs::path dir = scratch_dir("synth_join");
  sample_dataset(spec, dir.string());

  std::set<std::string> events;
  std::vector<std::string> header;
  csv::Reader::for_each_row((dir / "events.csv").string(), header,
                            [&](const std::vector<std::string>& row, size_t) {
                              events.insert(row[0] + "|" + row[1] + "|" + row[2]);
                            });
  for (const char* name : {"obs_lab.csv", "obs_dx.csv", "obs_reading.csv"}) {
    csv::Reader::for_each_row((dir / name).string(), header,
                              [&](const std::vector<std::string>& row, size_t) {
                                CHECK(events.count(row[0] + "|" + row[1] + "|" + row[2]) == 1);
                              });
  }
}

TEST_CASE("value rules fire once per trigger inside the same event") {
  OracleSpec spec = parse_oracle_spec(kClinic);
  fs::path dir = scratch_dir("synth_rules");
  sample_dataset(spec, dir.string());

  std::vector<std::string> header;
  std::map<std::string, int> flu_at;
  csv::Reader::for_each_row((dir / "obs_dx.csv").string(), header,
                            [&](const std::vector<std::string>& row, size_t) {
                              if (row[3] == "flu") flu_at[row[0] + "|" + row[1]]++;
                            });
  REQUIRE(!flu_at.empty());

  std::map<std::string, int> readings_at;
  csv::Reader::for_each_row((dir / "obs_reading.csv").string(), header,
                            [&](const std::vector<std::string>& row, size_t) {
                              CHECK(row[3] == "2");  // zero noise, exact echo of the rule mean
                              readings_at[row[0] + "|" + row[1]]++;
                            });
  CHECK(flu_at == readings_at);
}

TEST_CASE("window mode produces poisson event counts") {
  const char* text = R"(
n_subjects: 100
seed: 3
events_per_day: 2
horizon_days: 30
event_types:
  - {name: ping, transitions: {ping: 1.0}}
)";
  OracleSpec spec = parse_oracle_spec(text);
  fs::path dir = scratch_dir("synth_poisson");
  OracleSummary s = sample_dataset(spec, dir.string());

  // expected 60 per subject; total 6000 with sd ~77
  CHECK(std::abs(static_cast<double>(s.n_events) - 6000.0) < 400.0);

  std::map<std::string, size_t> per_subject;
  std::vector<std::string> header;
  double max_ts = 0;
  csv::Reader::for_each_row((dir / "events.csv").string(), header,
                            [&](const std::vector<std::string>& row, size_t) {
                              per_subject[row[0]]++;
                              max_ts = std::max(max_ts, parse_timestamp(row[1]));
                            });
  CHECK(max_ts <= spec.start_minutes + 30 * 1440.0);
  double mean = 0;
  for (const auto& [id, n] : per_subject) mean += static_cast<double>(n);
  mean /= 100.0;
  double var = 0;
  for (const auto& [id, n] : per_subject) {
    double d = static_cast<double>(n) - mean;
    var += d * d;
  }
  var /= 99.0;
  CHECK(var / mean > 0.6);  // Fano factor near 1 for a Poisson count
  CHECK(var / mean < 1.5);
}

TEST_CASE("task labels agree with recorded continuations and static columns") {
  OracleSpec spec = parse_oracle_spec(kClinic);
  fs::path dir = scratch_dir("synth_tasks");
  sample_dataset(spec, dir.string());

  struct Ev {
    double t;
    std::string type;
  };
  std::map<std::string, std::vector<Ev>> events;
  std::vector<std::string> header;
  csv::Reader::for_each_row((dir / "events.csv").string(), header,
                            [&](const std::vector<std::string>& row, size_t) {
                              events[row[0]].push_back({parse_timestamp(row[1]), row[2]});
                            });

  size_t checked = 0;
  csv::Reader::for_each_row(
      (dir / "admit_soon.task.csv").string(), header,
      [&](const std::vector<std::string>& row, size_t) {
        double t_a = parse_timestamp(row[1]);
        const auto& seq = events.at(row[0]);
        bool anchor_found = false;
        bool visible_target = false;
        for (const auto& e : seq) {
          if (e.t == t_a && e.type == "visit") anchor_found = true;
          if (e.t > t_a && e.t <= t_a + 1440.0 && e.type == "admission") visible_target = true;
        }
        CHECK(anchor_found);
        if (visible_target) {
          CHECK(row[2] == "1");
          ++checked;
        }
      });
  CHECK(checked > 0);

  std::map<std::string, std::string> sex;
  csv::Reader::for_each_row((dir / "subjects.csv").string(), header,
                            [&](const std::vector<std::string>& row, size_t) {
                              sex[row[0]] = row[2];  // subject_id, dob, sex
                            });
  csv::Reader::for_each_row((dir / "is_f.task.csv").string(), header,
                            [&](const std::vector<std::string>& row, size_t) {
                              CHECK(row[2] == (sex.at(row[0]) == "F" ? "1" : "0"));
                            });
}

TEST_CASE("paired dataset config validates and matches the emitted file") {
  OracleSpec spec = parse_oracle_spec(kClinic);
  fs::path dir = scratch_dir("synth_config");
  sample_dataset(spec, dir.string());

  DatasetConfig paired = paired_dataset_config(spec);
  CHECK(slurp(dir / "dataset_config.yaml") == serialize_dataset_config(paired));
  DatasetConfig loaded = load_dataset_config((dir / "dataset_config.yaml").string());
  CHECK(loaded == paired);

  CHECK(paired.split_fractions[0] == doctest::Approx(0.6));
  CHECK(paired.seed == 11);
  CHECK(paired.measurements.front().name == "event_type");
  CHECK(paired.measurements.front().implicit);
  const MeasurementConfig* lab = paired.find_measurement("lab");
  REQUIRE(lab);
  CHECK(lab->value_kind == ValueKind::MultivariateRegression);
  CHECK(lab->source_table == "obs_lab");
  CHECK(lab->key_column == "key");
  CHECK(lab->value_column == "value");
  CHECK(lab->min_frequency == 2);
  const MeasurementConfig* reading = paired.find_measurement("reading");
  REQUIRE(reading);
  CHECK(reading->key_column == "value");
  CHECK(paired.find_measurement("age")->temporality == Temporality::FunctionalTimeDependent);
  CHECK(paired.find_measurement("dob")->source_table == "subjects");
  CHECK(paired.find_measurement("sex")->temporality == Temporality::Static);
  CHECK(paired.find_source("obs_dx")->event_type_column == "event_type");
}

TEST_CASE("reference separates risky anchors from safe ones") {
  const char* text = R"(
n_subjects: 400
seed: 5
events_per_subject: 6
event_types:
  - name: checkup
    weight: 3
    transitions: {checkup: 0.96, crash: 0.04}
    tte: {kind: exponential, mean_minutes: 720}
  - name: risky
    weight: 3
    transitions: {risky: 0.3, crash: 0.7}
    tte: {kind: exponential, mean_minutes: 720}
  - name: crash
    weight: 0
    transitions: {checkup: 0.5, risky: 0.5}
    tte: {kind: exponential, mean_minutes: 720}
tasks:
  - {name: crash_soon, kind: event_within_horizon, target_type: crash, horizon_minutes: 2880}
)";
  OracleSpec spec = parse_oracle_spec(text);
  fs::path dir = scratch_dir("synth_bayes_sep");
  OracleSummary s = sample_dataset(spec, dir.string());
  auto [rows, positives] = s.task_rows.at("crash_soon");
  REQUIRE(rows == 400);
  REQUIRE(positives > 40);
  REQUIRE(positives < 360);

  BayesReference ref = bayes_reference(spec, dir.string(), "crash_soon", 500, 9);
  CHECK(ref.n_rows == 400);
  CHECK(ref.auroc > 0.70);
  CHECK(ref.mean_probability > 0.05);
  CHECK(ref.mean_probability < 0.95);

  // deterministic given a seed, stable across seeds
  BayesReference again = bayes_reference(spec, dir.string(), "crash_soon", 500, 9);
  CHECK(again.auroc == ref.auroc);
  BayesReference shifted = bayes_reference(spec, dir.string(), "crash_soon", 500, 10);
  CHECK(std::abs(shifted.auroc - ref.auroc) < 0.04);
}

TEST_CASE("reference hits the degenerate extremes") {
  // single informative state: labels independent of the (constant) score
  const char* flat = R"(
n_subjects: 150
seed: 6
events_per_subject: 4
event_types:
  - name: ping
    weight: 1
    transitions: {ping: 0.9, boom: 0.1}
    tte: {kind: exponential, mean_minutes: 720}
  - name: boom
    weight: 0
    transitions: {ping: 1.0}
    tte: {kind: exponential, mean_minutes: 720}
tasks:
  - name: boom_soon
    kind: event_within_horizon
    anchor_types: [ping]
    target_type: boom
    horizon_minutes: 2880
)";
  OracleSpec fspec = parse_oracle_spec(flat);
  fs::path fdir = scratch_dir("synth_bayes_flat");
  sample_dataset(fspec, fdir.string());
  BayesReference fref = bayes_reference(fspec, fdir.string(), "boom_soon", 300, 1);
  CHECK(std::abs(fref.auroc - 0.5) < 0.15);

  // two deterministic fates: the target follows a-starts and never e-starts
  const char* split = R"(
n_subjects: 40
seed: 8
events_per_subject: 1
event_types:
  - name: a
    weight: 1
    transitions: {b: 1.0}
    tte: {kind: exponential, mean_minutes: 10}
  - name: b
    weight: 0
    transitions: {b: 1.0}
    tte: {kind: exponential, mean_minutes: 10}
  - name: e
    weight: 1
    transitions: {f: 1.0}
    tte: {kind: exponential, mean_minutes: 10}
  - name: f
    weight: 0
    transitions: {f: 1.0}
    tte: {kind: exponential, mean_minutes: 10}
tasks:
  - {name: b_next, kind: event_within_horizon, target_type: b, horizon_minutes: 10000}
)";
  OracleSpec sspec = parse_oracle_spec(split);
  fs::path sdir = scratch_dir("synth_bayes_split");
  sample_dataset(sspec, sdir.string());
  BayesReference sref = bayes_reference(sspec, sdir.string(), "b_next", 200, 2);
  CHECK(sref.auroc == doctest::Approx(1.0));

  CHECK_THROWS_AS(bayes_reference(sspec, sdir.string(), "nope", 10, 1), Error);
}
