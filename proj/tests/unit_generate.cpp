#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "evseq/generate.hpp"
#include "evseq/synth.hpp"

using namespace evseq;
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

fs::path scratch_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / "evseq_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int m_index(const DatasetConfig& config, const std::string& name) {
  for (size_t i = 0; i < config.measurements.size(); ++i)
    if (config.measurements[i].name == name) return static_cast<int>(i);
  REQUIRE_MESSAGE(false, "no measurement named " << name);
  return -1;
}

ErrKind thrown_kind(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  REQUIRE_MESSAGE(false, "expected an Error");
  return ErrKind::Io;
}

DatasetConfig probe_config() {
  OracleSpec spec = parse_oracle_spec(R"(
n_subjects: 2
seed: 3
events_per_subject: 2
measurements:
  - {name: sex, kind: categorical, static: true, keys: {F: 1, M: 1}}
  - {name: dx, kind: categorical}
  - name: lab
    kind: multivariate
    values:
      hr: {mean: 80, stddev: 10}
      temp: {mean: 37, stddev: 1}
  - {name: reading, kind: univariate, value: {mean: 5, stddev: 2}}
event_types:
  - name: A
    transitions: {A: 0.5, B: 0.5}
  - name: B
    transitions: {A: 1}
dataset:
  functional_features: [age, time_of_day]
  split_fractions: [1, 0, 0]
)");
  return paired_dataset_config(spec);
}

InternalDataModel probe_raw(const DatasetConfig& config) {
  const int sex = m_index(config, "sex"), dob = m_index(config, "dob");
  const int dx = m_index(config, "dx"), lab = m_index(config, "lab");
  const int reading = m_index(config, "reading");

  InternalDataModel m;
  for (const auto& mc : config.measurements) m.measurement_names.push_back(mc.name);
  for (uint64_t s = 0; s < 2; ++s) {
    Subject subj;
    subj.id = s;
    subj.raw_id = "p" + std::to_string(s);
    StaticObs d;
    d.measurement = dob;
    d.value = 500.0 * static_cast<double>(s);
    d.has_value = true;
    subj.statics.push_back(d);
    StaticObs k;
    k.measurement = sex;
    k.key = s == 0 ? "F" : "M";
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
  int64_t next_row = 0;
  auto row = [&](int64_t ev, int meas, const char* key, double value, bool has) {
    MeasurementRow r;
    r.id = next_row++;
    r.event_id = ev;
    r.measurement = meas;
    r.key = key;
    r.value = has ? value : kAbsent;
    r.has_value = has;
    m.measurements.push_back(r);
  };
  event(0, 0, 0.0, "A");
  row(0, dx, "flu", kAbsent, false);
  row(0, lab, "hr", 80.0, true);
  row(0, reading, "", 5.0, true);
  event(1, 0, 720.0, "B");
  row(1, lab, "hr", 90.0, true);
  row(1, lab, "temp", 37.0, true);
  row(1, reading, "", 6.0, true);
  event(2, 0, 1440.0, "A");
  row(2, dx, "cough", kAbsent, false);
  event(3, 0, 2880.0, "A");
  event(4, 1, 100.0, "A");
  row(4, dx, "flu", kAbsent, false);
  row(4, lab, "temp", 36.5, true);
  event(5, 1, 400.0, "B");
  row(5, reading, "", 4.0, true);
  return m;
}

struct Pipeline {
  DatasetConfig config;
  FitArtifacts artifacts;
  InternalDataModel cooked;
  FeatureManifest manifest;
  std::vector<SubjectSequence> sequences;
  DropReport report;
};

Pipeline run_pipeline(const DatasetConfig& config, const InternalDataModel& raw) {
  Pipeline p;
  p.config = config;
  p.artifacts = fit_preprocessing(raw, config);
  p.cooked = transform(raw, config, p.artifacts, p.report);
  p.manifest = build_manifest(config, p.artifacts);
  p.sequences = serialize_subjects(p.cooked, config, p.artifacts, p.manifest, p.report);
  return p;
}

Pipeline probe_pipeline() {
  DatasetConfig config = probe_config();
  return run_pipeline(config, probe_raw(config));
}

ModelConfig small_config(EventMode mode, DependencyGraph graph = {}) {
  ModelConfig mc;
  mc.mode = mode;
  mc.dependency_graph = std::move(graph);
  mc.hidden_dim = 16;
  mc.num_layers = 2;
  mc.num_heads = 2;
  mc.max_seq_len = 8;
  return mc;
}

DependencyGraph probe_graph() {
  DependencyGraph g;
  g.stages = {
      {{"age"}, {"time_of_day"}},
      {{"event_type"},
       {"dob"},
       {"sex"},
       {"dx"},
       {"reading"},
       {"lab", PartSelector::CategoricalOnly}},
      {{"lab", PartSelector::NumericalOnly}},
  };
  return g;
}

void jitter(Model& m, uint64_t seed, double scale) {
  Rng rng(seed);
  for (Eigen::MatrixXd* t : m.param_list())
    for (Eigen::Index j = 0; j < t->cols(); ++j)
      for (Eigen::Index i = 0; i < t->rows(); ++i) (*t)(i, j) += scale * rng.normal();
}

int64_t within(const Pipeline& p, const std::string& meas, const std::string& key) {
  const Vocabulary* v = p.artifacts.vocabulary(meas);
  REQUIRE(v != nullptr);
  int64_t k = v->index_of(key);
  REQUIRE(k != 0);
  return k;
}

SubjectSequence head_of(const SubjectSequence& s, size_t k) {
  SubjectSequence t;
  t.subject_id = s.subject_id;
  t.dob_minutes = s.dob_minutes;
  t.static_indices = s.static_indices;
  t.event_times.assign(s.event_times.begin(), s.event_times.begin() + k);
  t.obs_indices.assign(s.obs_indices.begin(), s.obs_indices.begin() + k);
  t.obs_values.assign(s.obs_values.begin(), s.obs_values.begin() + k);
  t.obs_mask.assign(s.obs_mask.begin(), s.obs_mask.begin() + k);
  return t;
}

const SampledObs* find_obs(const GeneratedEvent& ev, const std::string& meas) {
  for (const auto& o : ev.observations)
    if (o.measurement == meas) return &o;
  return nullptr;
}

}  // namespace

TEST_CASE("gap sampling hits degenerate and analytic mixture moments") {
  Eigen::RowVectorXd sharp(3);
  sharp << 0.0, std::log(100.0), std::log(1e-8);
  Rng r1(42);
  CHECK(sample_tte(sharp, r1) == doctest::Approx(100.0).epsilon(1e-8));

  Rng r2(42), r3(42);
  Eigen::RowVectorXd mix(6);
  mix << 0.4, -0.3, -0.5, 1.0, -0.7, -0.25;
  CHECK(sample_tte(mix, r2) == sample_tte(mix, r3));  // one seed, one delta

  double w0 = std::exp(0.4), w1 = std::exp(-0.3);
  double z = w0 + w1;
  double analytic = w0 / z * std::exp(-0.5 + 0.5 * std::exp(2 * -0.7)) +
                    w1 / z * std::exp(1.0 + 0.5 * std::exp(2 * -0.25));
  Rng rng(7);
  double acc = 0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    double d = sample_tte(mix, rng);
    CHECK(d > 0.0);
    acc += d;
  }
  CHECK(std::abs(acc / n - analytic) / analytic < 0.01);
}

TEST_CASE("functional features reproduce serialization at arbitrary times") {
  Pipeline p = probe_pipeline();
  const SubjectSequence& s0 = p.sequences[0];
  REQUIRE(s0.dob_minutes == 0.0);

  auto feats = [&](double t, const SubjectSequence& subj) {
    return compute_functional_features(t, subj, p.config.measurements, p.artifacts, p.manifest);
  };

  // At the birth time the unnormalized age is zero; one year later it is
  // exactly one.
  auto at_dob = feats(0.0, s0);
  REQUIRE(at_dob.size() == 2);
  CHECK(at_dob[0].measurement == "age");
  CHECK(at_dob[0].raw_value == 0.0);
  CHECK(at_dob[0].has_value);
  auto year_on = feats(kMinutesPerYear, s0);
  CHECK(year_on[0].raw_value == 1.0);

  // 13:00 falls in the afternoon bucket.
  auto afternoon = feats(13.0 * 60.0, s0);
  CHECK(afternoon[1].measurement == "time_of_day");
  CHECK(afternoon[1].key == time_of_day_keys()[2]);
  CHECK(afternoon[1].index ==
        p.manifest.index_of("time_of_day", within(p, "time_of_day", afternoon[1].key)));
  CHECK_FALSE(afternoon[1].has_value);

  // Recomputing at a stored event time matches the serialized observations.
  for (size_t e = 0; e < s0.n_events(); ++e) {
    auto f = feats(s0.event_times[e], s0);
    // serialized layout is [event_type, age, time_of_day, ...]
    CHECK(f[0].index == s0.obs_indices[e][1]);
    CHECK(f[0].value == s0.obs_values[e][1]);
    CHECK(f[1].index == s0.obs_indices[e][2]);
  }

  SubjectSequence no_dob = s0;
  no_dob.dob_minutes = kAbsent;
  CHECK(thrown_kind([&] { feats(100.0, no_dob); }) == ErrKind::MissingStatic);
}

TEST_CASE("next-event sampling respects forced heads") {
  Pipeline p = probe_pipeline();
  Model m(small_config(EventMode::ConditionallyIndependent), p.config.measurements, p.manifest, 7);

  const SubjectSequence& hist = p.sequences[0];
  const FeatureBlock* et = p.manifest.block("event_type");
  const FeatureBlock* dx = p.manifest.block("dx");
  int64_t a = within(p, "event_type", "A");

  // Mass one on a single event type, everything else shut off.
  m.params().cat_heads.at("event_type").b(0, a) = 60.0;
  m.params().cat_heads.at("dx").b(0, dx->size) = 60.0;  // absent class
  m.params().presence_heads.at("lab").b.setConstant(-60.0);
  m.params().presence_heads.at("reading").b.setConstant(-60.0);

  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    GeneratedEvent ev = generate_next_event(m, hist, p.config.measurements, p.artifacts, rng);
    CHECK(ev.time > hist.event_times.back());
    REQUIRE(ev.observations.size() == 3);  // type and the two functional features
    CHECK(ev.observations[0].measurement == "event_type");
    CHECK(ev.observations[0].key == "A");
    CHECK(ev.observations[0].index == et->offset + a);
    CHECK(ev.observations[1].measurement == "age");
    CHECK(ev.observations[2].measurement == "time_of_day");
    for (const auto& o : ev.observations) {
      CHECK(o.index > 0);
      CHECK(o.index < p.manifest.total);
      if (o.has_value) CHECK(std::isfinite(o.value));
    }
  }

  SUBCASE("poisoned emissions are refused") {
    m.params().tte.b(0, 0) = std::numeric_limits<double>::quiet_NaN();
    Rng r(1);
    CHECK(thrown_kind([&] {
            generate_next_event(m, hist, p.config.measurements, p.artifacts, r);
          }) == ErrKind::NonFiniteEmission);
  }

  SUBCASE("an empty history is refused") {
    SubjectSequence empty;
    empty.dob_minutes = 0.0;
    Rng r(1);
    CHECK(thrown_kind([&] {
            generate_next_event(m, empty, p.config.measurements, p.artifacts, r);
          }) == ErrKind::EmptySubject);
  }

  SUBCASE("temperature must be positive") {
    Rng r(1);
    CHECK(thrown_kind([&] {
            generate_next_event(m, hist, p.config.measurements, p.artifacts, r, 0.0);
          }) == ErrKind::Schema);
  }
}

TEST_CASE("earlier-stage draws steer later-stage value distributions") {
  Pipeline p = probe_pipeline();
  const SubjectSequence& hist = p.sequences[0];
  int64_t flu = within(p, "dx", "flu"), cough = within(p, "dx", "cough");
  int64_t hr = within(p, "lab", "hr");

  // Fix everything stochastic except the dx class: hr always present, temp and
  // reading never, UNK stream off. Identical rng streams then isolate the
  // class draw as the only difference between the two runs.
  auto sample_hr_value = [&](int64_t forced_dx) {
    Model m(small_config(EventMode::NestedAttention, probe_graph()), p.config.measurements,
            p.manifest, 31);
    jitter(m, 200, 0.05);
    m.params().cat_heads.at("dx").b.setConstant(-60.0);
    m.params().cat_heads.at("dx").b(0, forced_dx) = 60.0;
    auto& lab_b = m.params().presence_heads.at("lab").b;
    lab_b.setConstant(-60.0);
    lab_b(0, hr) = 60.0;
    m.params().presence_heads.at("reading").b.setConstant(-60.0);
    Rng rng(9);
    GeneratedEvent ev = generate_next_event(m, hist, p.config.measurements, p.artifacts, rng);
    const SampledObs* lab = find_obs(ev, "lab");
    REQUIRE(lab != nullptr);
    CHECK(lab->key == "hr");
    REQUIRE(lab->has_value);
    const SampledObs* dxo = find_obs(ev, "dx");
    REQUIRE(dxo != nullptr);
    return std::pair<std::string, double>(dxo->key, lab->value);
  };

  auto [k1, v1] = sample_hr_value(flu);
  auto [k2, v2] = sample_hr_value(cough);
  CHECK(k1 == "flu");
  CHECK(k2 == "cough");
  CHECK(v1 != v2);  // the sampled key reached the value head

  // Same forcing twice gives the same draw.
  auto [k3, v3] = sample_hr_value(flu);
  CHECK(v3 == v1);
}

TEST_CASE("trajectories preserve the prompt and keep time strictly increasing") {
  Pipeline p = probe_pipeline();
  Model m(small_config(EventMode::NestedAttention, probe_graph()), p.config.measurements,
          p.manifest, 41);
  jitter(m, 300, 0.05);
  const SubjectSequence& prompt = p.sequences[0];

  GenerateOptions opts;
  opts.max_events = 6;
  GeneratedTrajectory t = generate_trajectory(m, prompt, p.config.measurements, p.artifacts, 77,
                                              opts);
  CHECK(t.subject_id == prompt.subject_id);
  CHECK(t.prompt_len == prompt.n_events());
  CHECK(t.rng_seed == 77);
  CHECK(t.stop_reason == StopReason::MaxEvents);
  REQUIRE(t.events.size() == prompt.n_events() + 6);

  for (size_t e = 0; e < prompt.n_events(); ++e) {
    CHECK(t.events[e].time == prompt.event_times[e]);
    size_t live = 0;
    for (int64_t idx : prompt.obs_indices[e]) live += idx != 0;
    CHECK(t.events[e].observations.size() == live);
  }
  for (size_t e = 1; e < t.events.size(); ++e) CHECK(t.events[e].time > t.events[e - 1].time);

  // Stored stage-0 features equal a fresh recomputation at the stored time.
  for (size_t e = t.prompt_len; e < t.events.size(); ++e) {
    auto f = compute_functional_features(t.events[e].time, prompt, p.config.measurements,
                                         p.artifacts, p.manifest);
    const SampledObs* age = find_obs(t.events[e], "age");
    const SampledObs* tod = find_obs(t.events[e], "time_of_day");
    REQUIRE(age != nullptr);
    REQUIRE(tod != nullptr);
    CHECK(age->value == f[0].value);
    CHECK(age->raw_value == f[0].raw_value);
    CHECK(tod->index == f[1].index);
  }

  SUBCASE("same seed, same bytes") {
    GeneratedTrajectory u = generate_trajectory(m, prompt, p.config.measurements, p.artifacts,
                                                77, opts);
    CHECK(trajectory_to_json(u) == trajectory_to_json(t));
  }

  SUBCASE("zero budget stops immediately") {
    GenerateOptions none;
    none.max_events = 0;
    GeneratedTrajectory u = generate_trajectory(m, prompt, p.config.measurements, p.artifacts,
                                                77, none);
    CHECK(u.events.size() == u.prompt_len);
    CHECK(u.stop_reason == StopReason::MaxEvents);
  }

  SUBCASE("a tiny horizon stops before the first kept event") {
    GenerateOptions tight;
    tight.max_events = 6;
    tight.max_horizon_minutes = 1e-9;
    GeneratedTrajectory u = generate_trajectory(m, prompt, p.config.measurements, p.artifacts,
                                                77, tight);
    CHECK(u.events.size() == u.prompt_len);
    CHECK(u.stop_reason == StopReason::MaxHorizon);
  }

  SUBCASE("generation slides its window past max_seq_len") {
    SubjectSequence long_prompt = prompt;  // 4 events, msl 8: window must slide
    GenerateOptions many;
    many.max_events = 12;
    GeneratedTrajectory u = generate_trajectory(m, long_prompt, p.config.measurements,
                                                p.artifacts, 13, many);
    REQUIRE(u.events.size() == u.prompt_len + 12);
    for (size_t e = 1; e < u.events.size(); ++e) CHECK(u.events[e].time > u.events[e - 1].time);
  }

  SUBCASE("prompts beyond the context length are refused") {
    ModelConfig tiny = small_config(EventMode::ConditionallyIndependent);
    tiny.max_seq_len = 2;
    Model small(tiny, p.config.measurements, p.manifest, 1);
    CHECK(thrown_kind([&] {
            generate_trajectory(small, prompt, p.config.measurements, p.artifacts, 1, opts);
          }) == ErrKind::ShapeMismatch);
  }
}

TEST_CASE("a model fit to a fixed cadence generates gaps near it") {
  DatasetConfig config = probe_config();
  const int sex = m_index(config, "sex"), dob = m_index(config, "dob");
  const int reading = m_index(config, "reading");

  // Constant 100-minute cadence, staggered starts so clock buckets vary.
  InternalDataModel raw;
  for (const auto& mc : config.measurements) raw.measurement_names.push_back(mc.name);
  Rng mk(3);
  int64_t next_event = 0, next_row = 0;
  const double tau = 100.0;
  for (uint64_t s = 0; s < 12; ++s) {
    Subject subj;
    subj.id = s;
    subj.raw_id = "s" + std::to_string(s);
    StaticObs d;
    d.measurement = dob;
    d.value = 0.0;
    d.has_value = true;
    subj.statics.push_back(d);
    StaticObs k;
    k.measurement = sex;
    k.key = s % 2 == 0 ? "F" : "M";
    subj.statics.push_back(k);
    raw.subjects.push_back(subj);
    double start = 17.0 * static_cast<double>(s);
    for (int e = 0; e < 8; ++e) {
      Event ev;
      ev.id = next_event++;
      ev.subject_id = s;
      ev.time = start + tau * e;
      ev.type = "A";
      raw.events.push_back(ev);
      if (mk.uniform() < 0.5) {
        MeasurementRow r;
        r.id = next_row++;
        r.event_id = ev.id;
        r.measurement = reading;
        r.key = "";
        r.value = 5.0 + 2.0 * mk.normal();
        r.has_value = true;
        raw.measurements.push_back(r);
      }
    }
  }
  Pipeline p = run_pipeline(config, raw);
  REQUIRE(p.sequences.size() == 12);

  std::vector<const SubjectSequence*> seqs;
  for (const auto& s : p.sequences) seqs.push_back(&s);
  SparseBatch batch = collate(seqs, 8, CollateMode::Eval);

  ModelConfig mc = small_config(EventMode::ConditionallyIndependent);
  mc.num_layers = 1;
  Model m(mc, p.config.measurements, p.manifest, 17);
  double first = 0, last = 0;
  for (int i = 0; i < 300; ++i) {
    double loss = m.train_step(batch, 1e-2).total;
    if (i == 0) first = loss;
    last = loss;
  }
  REQUIRE(last < first);

  std::vector<SubjectSequence> prompts;
  for (const auto& s : p.sequences) prompts.push_back(head_of(s, 2));
  std::vector<const SubjectSequence*> cycled;
  for (int i = 0; i < 500; ++i) cycled.push_back(&prompts[static_cast<size_t>(i) % prompts.size()]);

  GenerateOptions opts;
  opts.max_events = 3;
  std::vector<GeneratedTrajectory> ts =
      generate_trajectories(m, cycled, p.config.measurements, p.artifacts, 19, opts);
  REQUIRE(ts.size() == 500);

  double acc = 0;
  int64_t n = 0;
  for (const auto& t : ts) {
    for (size_t e = t.prompt_len; e < t.events.size(); ++e) {
      acc += t.events[e].time - t.events[e - 1].time;
      ++n;
    }
  }
  REQUIRE(n == 1500);
  double mean = acc / static_cast<double>(n);
  CHECK(std::abs(mean - tau) / tau < 0.15);

  // Batch results match per-prompt runs on the derived stream.
  GeneratedTrajectory solo = generate_trajectory(m, *cycled[3], p.config.measurements,
                                                 p.artifacts, mix64(19, 3), opts);
  CHECK(trajectory_to_json(solo) == trajectory_to_json(ts[3]));
}

TEST_CASE("trajectory files hold one self-contained line each") {
  Pipeline p = probe_pipeline();
  Model m(small_config(EventMode::ConditionallyIndependent), p.config.measurements, p.manifest,
          7);
  jitter(m, 100, 0.05);

  std::vector<const SubjectSequence*> prompts;
  for (const auto& s : p.sequences) prompts.push_back(&s);
  GenerateOptions opts;
  opts.max_events = 2;
  auto ts = generate_trajectories(m, prompts, p.config.measurements, p.artifacts, 23, opts);

  fs::path dir = scratch_dir("generate_jsonl");
  std::string path = (dir / "trajectories.jsonl").string();
  write_trajectories(path, ts);

  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  REQUIRE(lines.size() == ts.size());

  ojson doc = ojson::parse(lines[0]);
  CHECK(doc.at("subject_id").get<uint64_t>() == ts[0].subject_id);
  CHECK(doc.at("prompt_len").get<size_t>() == ts[0].prompt_len);
  CHECK(doc.at("stop_reason").get<std::string>() == "max_events");
  REQUIRE(doc.at("events").size() == ts[0].events.size());
  const ojson& first = doc.at("events").at(0);
  CHECK(first.at("time").get<double>() == ts[0].events[0].time);
  // The prompt echo names real covariates: the first event carried its type
  // and a valued hr draw.
  const ojson& cov = first.at("covariates");
  REQUIRE(cov.contains("event_type"));
  CHECK(cov.at("event_type").at(0).at("key").get<std::string>() == "A");
  REQUIRE(cov.contains("lab"));
  CHECK(cov.at("lab").at(0).at("key").get<std::string>() == "hr");
  CHECK(cov.at("lab").at(0).contains("value"));
  CHECK(cov.at("lab").at(0).contains("raw_value"));
  CHECK(cov.at("lab").at(0).at("raw_value").get<double>() == doctest::Approx(80.0));
}
