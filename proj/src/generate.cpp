#include "evseq/generate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace evseq {

using json = nlohmann::ordered_json;

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Inverse-cdf draw from softmax(logits / T). One uniform per call.
int64_t sample_from_logits(const Eigen::RowVectorXd& logits, Rng& rng, double temperature) {
  Eigen::RowVectorXd scaled = logits / temperature;
  double m = scaled.maxCoeff();
  Eigen::RowVectorXd p = (scaled.array() - m).exp();
  p /= p.sum();
  double u = rng.uniform();
  double cum = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    cum += p(i);
    if (u < cum) return i;
  }
  return p.size() - 1;  // rounding slack lands on the last class
}

std::string vocab_entry(const FitArtifacts& artifacts, const std::string& measurement,
                        int64_t within) {
  const Vocabulary* v = artifacts.vocabulary(measurement);
  if (v != nullptr && within >= 0 && within < v->size())
    return v->entries[static_cast<size_t>(within)];
  return "";
}

double denormalized(const FitArtifacts& artifacts, const std::string& measurement,
                    const std::string& key, double z) {
  const NumericStats* st = artifacts.stats(measurement, key);
  return st != nullptr ? st->denormalize(z) : z;
}

SubjectSequence tail_window(const SubjectSequence& s, size_t window) {
  if (s.n_events() <= window) return s;
  SubjectSequence t;
  t.subject_id = s.subject_id;
  t.dob_minutes = s.dob_minutes;
  t.static_indices = s.static_indices;
  size_t begin = s.n_events() - window;
  t.event_times.assign(s.event_times.begin() + begin, s.event_times.end());
  t.obs_indices.assign(s.obs_indices.begin() + begin, s.obs_indices.end());
  t.obs_values.assign(s.obs_values.begin() + begin, s.obs_values.end());
  t.obs_mask.assign(s.obs_mask.begin() + begin, s.obs_mask.end());
  return t;
}

void append_event(SubjectSequence& s, const GeneratedEvent& ev) {
  s.event_times.push_back(ev.time);
  s.obs_indices.emplace_back();
  s.obs_values.emplace_back();
  s.obs_mask.emplace_back();
  for (const auto& o : ev.observations) {
    s.obs_indices.back().push_back(o.index);
    s.obs_values.back().push_back(o.has_value ? o.value : kAbsent);
    s.obs_mask.back().push_back(o.has_value ? 1 : 0);
  }
}

// Prompt events re-expressed in covariate form, so a trajectory file is
// self-contained.
GeneratedEvent decode_event(const SubjectSequence& s, size_t pos, const FitArtifacts& artifacts,
                            const FeatureManifest& manifest) {
  GeneratedEvent ev;
  ev.time = s.event_times[pos];
  for (size_t i = 0; i < s.obs_indices[pos].size(); ++i) {
    int64_t idx = s.obs_indices[pos][i];
    if (idx == 0) continue;
    auto [block, within] = manifest.locate(idx);
    SampledObs o;
    o.measurement = block->measurement;
    if (block->keyed) o.key = vocab_entry(artifacts, block->measurement, within);
    o.index = idx;
    if (s.obs_mask[pos][i] != 0) {
      o.value = s.obs_values[pos][i];
      o.raw_value = denormalized(artifacts, block->measurement, o.key, o.value);
      o.has_value = true;
    }
    ev.observations.push_back(std::move(o));
  }
  return ev;
}

}  // namespace

double sample_tte(const Eigen::RowVectorXd& params, Rng& rng, double temperature) {
  const Eigen::Index k = params.size() / 3;
  int64_t c = sample_from_logits(params.head(k), rng, temperature);
  double mu = params(k + c);
  double sigma = std::exp(params(2 * k + c));
  return std::exp(mu + sigma * std::sqrt(temperature) * rng.normal());
}

std::vector<SampledObs> compute_functional_features(
    double time_minutes, const SubjectSequence& subject,
    const std::vector<MeasurementConfig>& measurements, const FitArtifacts& artifacts,
    const FeatureManifest& manifest) {
  std::vector<SampledObs> out;
  for (const auto& mc : measurements) {
    if (mc.temporality != Temporality::FunctionalTimeDependent) continue;
    if (mc.name == "age") {
      if (std::isnan(subject.dob_minutes))
        fail(ErrKind::MissingStatic, "subject " + std::to_string(subject.subject_id) +
                                         " has no birth time, required by the age feature");
      const NumericStats* st = artifacts.stats("age");
      if (st == nullptr) fail(ErrKind::MissingFitArtifact, "no fitted stats for 'age'");
      SampledObs o;
      o.measurement = "age";
      o.index = manifest.index_of("age", 0);
      o.raw_value = age_years(time_minutes, subject.dob_minutes);
      o.value = st->normalize(o.raw_value);
      o.has_value = true;
      out.push_back(std::move(o));
    } else if (mc.name == "time_of_day") {
      const Vocabulary* v = artifacts.vocabulary("time_of_day");
      if (v == nullptr) fail(ErrKind::MissingFitArtifact, "no fitted vocabulary for 'time_of_day'");
      const std::string& bucket =
          time_of_day_keys()[static_cast<size_t>(time_of_day_bucket(time_minutes))];
      SampledObs o;
      o.measurement = "time_of_day";
      o.key = bucket;
      o.index = manifest.index_of("time_of_day", v->index_of(bucket));
      out.push_back(std::move(o));
    } else {
      fail(ErrKind::Schema, "no registered feature function named '" + mc.name + "'");
    }
  }
  return out;
}

GeneratedEvent generate_next_event(const Model& model, const SubjectSequence& history,
                                   const std::vector<MeasurementConfig>& measurements,
                                   const FitArtifacts& artifacts, Rng& rng, double temperature) {
  if (history.n_events() == 0)
    fail(ErrKind::EmptySubject, "generation needs at least one prompt event");
  if (!(temperature > 0)) fail(ErrKind::Schema, "temperature must be positive");
  const double T = temperature;
  const FeatureManifest& manifest = model.manifest();
  const size_t n = history.n_events();
  const Eigen::Index row = static_cast<Eigen::Index>(n) - 1;

  SparseBatch base = collate({&history}, n, CollateMode::Eval);
  Emissions head = model.forward(base);
  if (!head.tte.row(row).allFinite())
    fail(ErrKind::NonFiniteEmission, "gap mixture parameters are not finite");
  double delta = std::max(sample_tte(head.tte.row(row), rng, T), kMinTteDelta);

  GeneratedEvent ev;
  ev.time = history.event_times.back() + delta;
  ev.observations = compute_functional_features(ev.time, history, measurements, artifacts, manifest);

  // Working copy with the half-built event appended: later stages condition on
  // what earlier stages have sampled so far.
  SubjectSequence work = history;
  append_event(work, ev);
  auto push_obs = [&](const SampledObs& o) {
    work.obs_indices.back().push_back(o.index);
    work.obs_values.back().push_back(o.has_value ? o.value : kAbsent);
    work.obs_mask.back().push_back(o.has_value ? 1 : 0);
  };

  const auto& routes = model.routes();
  struct Pending {
    size_t route, ev_pos, work_pos;
    int64_t stream;
  };
  std::vector<Pending> pending;

  // Keys and presence first, then values, both in measurement order; the rng
  // consumption order is part of the determinism contract.
  auto run_pass = [&](const Emissions& em, int g) {
    for (size_t ri = 0; ri < routes.size(); ++ri) {
      const Model::Route& r = routes[ri];
      if (!r.modeled || r.cat_stage != g) continue;
      if (r.kind == ValueKind::Categorical) {
        const Eigen::MatrixXd& mat = em.categorical.at(r.name);
        if (!mat.row(row).allFinite())
          fail(ErrKind::NonFiniteEmission, "'" + r.name + "' logits are not finite");
        int64_t cls = sample_from_logits(mat.row(row), rng, T);
        if (cls == r.size) continue;  // the explicit absent class
        SampledObs o;
        o.measurement = r.name;
        o.key = vocab_entry(artifacts, r.name, cls);
        o.index = r.offset + cls;
        push_obs(o);
        ev.observations.push_back(std::move(o));
      } else {
        const Eigen::MatrixXd& mat = em.numeric.at(r.name);
        if (!mat.row(row).allFinite())
          fail(ErrKind::NonFiniteEmission, "'" + r.name + "' parameters are not finite");
        for (int64_t j = 0; j < r.size; ++j) {
          double p = sigmoid(mat(row, j) / T);
          if (rng.uniform() >= p) continue;
          SampledObs o;
          o.measurement = r.name;
          if (r.kind == ValueKind::MultivariateRegression) o.key = vocab_entry(artifacts, r.name, j);
          o.index = r.offset + j;
          pending.push_back({ri, ev.observations.size(), work.obs_indices.back().size(), j});
          push_obs(o);
          ev.observations.push_back(std::move(o));
        }
      }
    }
    for (size_t ri = 0; ri < routes.size(); ++ri) {
      const Model::Route& r = routes[ri];
      if (!r.modeled || r.kind == ValueKind::Categorical || r.num_stage != g) continue;
      const Eigen::MatrixXd& mat = em.numeric.at(r.name);
      if (!mat.row(row).allFinite())
        fail(ErrKind::NonFiniteEmission, "'" + r.name + "' parameters are not finite");
      for (const Pending& pd : pending) {
        if (pd.route != ri) continue;
        double mu = mat(row, r.size + pd.stream);
        double sigma = std::exp(mat(row, 2 * r.size + pd.stream));
        double z = mu + sigma * std::sqrt(T) * rng.normal();
        SampledObs& o = ev.observations[pd.ev_pos];
        o.value = z;
        o.raw_value = denormalized(artifacts, r.name, o.key, z);
        o.has_value = true;
        work.obs_values.back()[pd.work_pos] = z;
        work.obs_mask.back()[pd.work_pos] = 1;
      }
      pending.erase(std::remove_if(pending.begin(), pending.end(),
                                   [&](const Pending& pd) { return pd.route == ri; }),
                    pending.end());
    }
  };

  if (model.config().mode == EventMode::NestedAttention) {
    for (int g = 1; g < model.n_stages(); ++g) {
      SparseBatch b = collate({&work}, n + 1, CollateMode::Eval);
      Emissions em = model.forward(b);
      run_pass(em, g);
    }
  } else {
    run_pass(head, -1);  // routes carry no stages outside the nested mode
  }

  // Match the stored layout: event type leads, features and draws follow.
  std::stable_partition(ev.observations.begin(), ev.observations.end(), [](const SampledObs& o) {
    return o.measurement == kEventTypeMeasurement;
  });
  return ev;
}

GeneratedTrajectory generate_trajectory(const Model& model, const SubjectSequence& prompt,
                                        const std::vector<MeasurementConfig>& measurements,
                                        const FitArtifacts& artifacts, uint64_t seed,
                                        const GenerateOptions& options) {
  if (prompt.n_events() == 0) fail(ErrKind::EmptySubject, "prompt must contain at least one event");
  if (static_cast<int64_t>(prompt.n_events()) > model.config().max_seq_len)
    fail(ErrKind::ShapeMismatch, "prompt is longer than max_seq_len");

  GeneratedTrajectory out;
  out.subject_id = prompt.subject_id;
  out.prompt_len = prompt.n_events();
  out.rng_seed = seed;
  for (size_t s = 0; s < prompt.n_events(); ++s)
    out.events.push_back(decode_event(prompt, s, artifacts, model.manifest()));

  Rng rng(seed);
  SubjectSequence work = prompt;
  const double origin = prompt.event_times.back();
  const size_t window =
      static_cast<size_t>(std::max<int64_t>(model.config().max_seq_len - 1, 1));
  for (int64_t k = 0; k < options.max_events; ++k) {
    SubjectSequence win = tail_window(work, window);
    GeneratedEvent ev =
        generate_next_event(model, win, measurements, artifacts, rng, options.temperature);
    if (ev.time - origin > options.max_horizon_minutes) {
      out.stop_reason = StopReason::MaxHorizon;  // the overshooting event is dropped
      return out;
    }
    append_event(work, ev);
    out.events.push_back(std::move(ev));
  }
  out.stop_reason = StopReason::MaxEvents;
  return out;
}

std::vector<GeneratedTrajectory> generate_trajectories(
    const Model& model, const std::vector<const SubjectSequence*>& prompts,
    const std::vector<MeasurementConfig>& measurements, const FitArtifacts& artifacts,
    uint64_t seed, const GenerateOptions& options) {
  std::vector<GeneratedTrajectory> out(prompts.size());
  for (size_t i = 0; i < prompts.size(); ++i)
    out[i] = generate_trajectory(model, *prompts[i], measurements, artifacts, mix64(seed, i),
                                 options);
  return out;
}

std::string trajectory_to_json(const GeneratedTrajectory& trajectory) {
  json doc;
  doc["subject_id"] = trajectory.subject_id;
  doc["prompt_len"] = trajectory.prompt_len;
  doc["rng_seed"] = trajectory.rng_seed;
  doc["stop_reason"] =
      trajectory.stop_reason == StopReason::MaxEvents ? "max_events" : "max_horizon";
  json events = json::array();
  for (const auto& ev : trajectory.events) {
    json ej;
    ej["time"] = ev.time;
    json cov = json::object();
    for (const auto& o : ev.observations) {
      json oj = json::object();
      if (!o.key.empty()) oj["key"] = o.key;
      if (o.has_value) {
        oj["value"] = o.value;
        oj["raw_value"] = o.raw_value;
      }
      cov[o.measurement].push_back(oj);
    }
    ej["covariates"] = std::move(cov);
    events.push_back(std::move(ej));
  }
  doc["events"] = std::move(events);
  return doc.dump();
}

void write_trajectories(const std::string& path,
                        const std::vector<GeneratedTrajectory>& trajectories) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrKind::Io, "cannot write " + path);
  for (const auto& t : trajectories) out << trajectory_to_json(t) << "\n";
  if (!out) fail(ErrKind::Io, "short write to " + path);
}

}  // namespace evseq
