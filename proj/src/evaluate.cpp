#include "evseq/evaluate.hpp"

#include <algorithm>
#include <cstddef>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "evseq/common.hpp"
#include "evseq/csv.hpp"
#include "evseq/metrics.hpp"

namespace evseq {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

TaskSpec load_task(const std::string& csv_path) {
  TaskSpec task;
  fs::path p(csv_path);
  std::string stem = p.stem().string();  // "<name>.task" for the paired layout
  if (stem.size() > 5 && stem.substr(stem.size() - 5) == ".task") stem.resize(stem.size() - 5);
  task.name = stem;

  fs::path header_path = fs::path(p).replace_extension(".json");
  if (fs::exists(header_path)) {
    std::ifstream in(header_path, std::ios::binary);
    json h;
    try {
      in >> h;
    } catch (const std::exception& e) {
      fail(ErrKind::Format, "task header " + header_path.string() + ": " + e.what());
    }
    if (h.contains("name")) task.name = h["name"].get<std::string>();
    if (h.contains("kind")) task.kind = h["kind"].get<std::string>();
    if (h.contains("target_type")) task.target_type = h["target_type"].get<std::string>();
    if (h.contains("horizon_minutes")) task.horizon_minutes = h["horizon_minutes"].get<double>();
    if (h.contains("anchor_types"))
      task.anchor_types = h["anchor_types"].get<std::vector<std::string>>();
    if (h.contains("measurement")) task.static_measurement = h["measurement"].get<std::string>();
    if (h.contains("key")) task.static_key = h["key"].get<std::string>();
  }

  std::vector<std::string> header;
  csv::Reader::for_each_row(csv_path, header, [&](const std::vector<std::string>& row, size_t rno) {
    if (row.size() != 3)
      fail(ErrKind::Format, "task row " + std::to_string(rno) + ": expected 3 fields");
    TaskSpec::Row r;
    r.subject = row[0];
    if (r.subject.empty()) fail(ErrKind::Format, "task row " + std::to_string(rno) + ": empty subject");
    r.prompt_end = parse_timestamp(row[1], "task row " + std::to_string(rno));
    if (row[2] == "0")
      r.label = 0;
    else if (row[2] == "1")
      r.label = 1;
    else
      fail(ErrKind::Format, "task row " + std::to_string(rno) + ": label must be 0 or 1");
    task.rows.push_back(std::move(r));
  });
  return task;
}

std::map<std::string, uint64_t> subject_id_map(const InternalDataModel& model) {
  std::map<std::string, uint64_t> out;
  for (const auto& s : model.subjects)
    out[s.raw_id.empty() ? std::to_string(s.id) : s.raw_id] = s.id;
  return out;
}

std::vector<CohortRow> resolve_cohort(const TaskSpec& task,
                                      const std::vector<SubjectSequence>& sequences,
                                      const std::map<std::string, uint64_t>& ids) {
  std::map<uint64_t, const SubjectSequence*> by_id;
  for (const auto& s : sequences) by_id[s.subject_id] = &s;

  std::vector<CohortRow> out;
  out.reserve(task.rows.size());
  for (const auto& r : task.rows) {
    auto idit = ids.find(r.subject);
    if (idit == ids.end())
      fail(ErrKind::Reference, "task subject '" + r.subject + "' is not in the dataset");
    auto sit = by_id.find(idit->second);
    if (sit == by_id.end())
      fail(ErrKind::Reference, "task subject '" + r.subject + "' has no sequence in this split");
    const SubjectSequence& seq = *sit->second;

    // A row may anchor at the subject's final event: labels can hinge on the
    // unrecorded future, so only a non-empty prompt is required.
    size_t len = 0;
    while (len < seq.n_events() && seq.event_times[len] <= r.prompt_end + 1e-9) ++len;
    if (len == 0)
      fail(ErrKind::Reference,
           "task subject '" + r.subject + "': no event at or before the prompt end");

    CohortRow row;
    row.sequence = &seq;
    row.subject = r.subject;
    row.prompt_len = len;
    row.prompt_end = r.prompt_end;
    row.label = r.label;
    out.push_back(row);
  }
  return out;
}

SubjectSequence cohort_prompt(const CohortRow& row, int64_t max_seq_len) {
  const SubjectSequence& src = *row.sequence;
  size_t keep = std::min(row.prompt_len, static_cast<size_t>(std::max<int64_t>(max_seq_len, 1)));
  size_t begin = row.prompt_len - keep;
  SubjectSequence out;
  out.subject_id = src.subject_id;
  out.dob_minutes = src.dob_minutes;
  out.static_indices = src.static_indices;
  out.event_times.assign(src.event_times.begin() + static_cast<std::ptrdiff_t>(begin),
                         src.event_times.begin() + static_cast<std::ptrdiff_t>(row.prompt_len));
  out.obs_indices.assign(src.obs_indices.begin() + static_cast<std::ptrdiff_t>(begin),
                         src.obs_indices.begin() + static_cast<std::ptrdiff_t>(row.prompt_len));
  out.obs_values.assign(src.obs_values.begin() + static_cast<std::ptrdiff_t>(begin),
                        src.obs_values.begin() + static_cast<std::ptrdiff_t>(row.prompt_len));
  out.obs_mask.assign(src.obs_mask.begin() + static_cast<std::ptrdiff_t>(begin),
                      src.obs_mask.begin() + static_cast<std::ptrdiff_t>(row.prompt_len));
  return out;
}

// ---- teacher-forced generative metrics ----

GenerativeReport eval_generative(const Model& model,
                                 const std::vector<SubjectSequence>& sequences,
                                 const FitArtifacts& artifacts, size_t batch_size) {
  if (sequences.empty()) fail(ErrKind::EmptySplit, "no sequences to evaluate");
  if (batch_size == 0) batch_size = 1;
  const auto msl = static_cast<size_t>(model.config().max_seq_len);
  const auto& routes = model.routes();

  auto route_at = [&](int64_t idx) -> const Model::Route* {
    for (const auto& r : routes)
      if (idx >= r.offset && idx < r.offset + r.size) return &r;
    return nullptr;
  };

  GenerativeReport rep;
  rep.n_sequences = sequences.size();
  double nll_sum = 0;
  std::map<std::string, double> head_sums;

  struct CatAcc {
    int64_t correct = 0, total = 0;
    std::vector<std::vector<double>> scores;  // per class, per transition
    std::vector<std::vector<int>> labels;
  };
  std::map<std::string, CatAcc> cats;
  struct StreamAcc {
    double se = 0;
    int64_t n = 0;
  };
  std::map<std::string, std::map<int64_t, StreamAcc>> streams;
  for (const auto& r : routes) {
    if (!r.modeled) continue;
    if (r.kind == ValueKind::Categorical) {
      CatAcc& a = cats[r.name];
      a.scores.resize(static_cast<size_t>(r.size) + 1);
      a.labels.resize(static_cast<size_t>(r.size) + 1);
    } else {
      streams[r.name];
    }
  }

  for (size_t at = 0; at < sequences.size(); at += batch_size) {
    std::vector<const SubjectSequence*> ptrs;
    for (size_t i = at; i < std::min(at + batch_size, sequences.size()); ++i)
      ptrs.push_back(&sequences[i]);
    SparseBatch batch = collate(ptrs, msl, CollateMode::Eval);
    for (uint8_t live : batch.event_mask) rep.n_events += live;

    NllResult res = model.nll(batch);
    auto w = static_cast<double>(res.transitions);
    rep.transitions += res.transitions;
    nll_sum += res.total * w;
    for (const auto& [k, v] : res.by_head) head_sums[k] += v * w;
    if (res.transitions == 0) continue;

    Emissions em = model.forward(batch);
    for (size_t b = 0; b < batch.B; ++b) {
      for (size_t s = 0; s + 1 < batch.S; ++s) {
        if (!batch.live(b, s) || !batch.live(b, s + 1)) continue;
        auto pos = static_cast<Eigen::Index>(batch.at(b, s));

        std::map<std::string, int64_t> cat_target;
        for (const auto& r : routes)
          if (r.modeled && r.kind == ValueKind::Categorical) cat_target[r.name] = r.size;
        std::map<std::string, std::vector<std::pair<int64_t, double>>> value_target;

        for (size_t m = 0; m < batch.M; ++m) {
          size_t c = batch.cell(b, s + 1, m);
          int64_t idx = batch.obs_indices[c];
          if (idx == 0) continue;
          const Model::Route* r = route_at(idx);
          if (r == nullptr || !r->modeled) continue;
          int64_t within = idx - r->offset;
          if (r->kind == ValueKind::Categorical) {
            int64_t& t = cat_target[r->name];
            if (t == r->size) t = within;  // first observation wins
          } else if (batch.obs_value_mask[c]) {
            auto& seen = value_target[r->name];
            bool dup = false;
            for (const auto& [j, _] : seen) dup |= j == within;
            if (!dup) seen.emplace_back(within, batch.obs_values[c]);
          }
        }

        for (const auto& [name, target] : cat_target) {
          const Eigen::MatrixXd& logits = em.categorical.at(name);
          Eigen::RowVectorXd row = logits.row(pos);
          Eigen::RowVectorXd probs = (row.array() - row.maxCoeff()).exp();
          probs /= probs.sum();
          Eigen::Index argmax = 0;
          row.maxCoeff(&argmax);
          CatAcc& a = cats[name];
          a.correct += argmax == target;
          a.total += 1;
          for (Eigen::Index cls = 0; cls < row.size(); ++cls) {
            a.scores[static_cast<size_t>(cls)].push_back(probs(cls));
            a.labels[static_cast<size_t>(cls)].push_back(cls == target ? 1 : 0);
          }
        }
        for (const auto& [name, vals] : value_target) {
          const Eigen::MatrixXd& numeric = em.numeric.at(name);
          int64_t size = numeric.cols() / 3;
          for (const auto& [j, z] : vals) {
            double mean = numeric(pos, size + j);
            StreamAcc& acc = streams[name][j];
            acc.se += (mean - z) * (mean - z);
            acc.n += 1;
          }
        }
      }
    }
  }

  if (rep.transitions == 0) fail(ErrKind::EmptySplit, "split has no transitions");
  auto total = static_cast<double>(rep.transitions);
  rep.total_nll = nll_sum / total;
  for (const auto& [k, v] : head_sums) rep.by_head[k] = v / total;

  for (const auto& [name, a] : cats) {
    if (a.total == 0) continue;
    rep.cat_accuracy[name] = static_cast<double>(a.correct) / static_cast<double>(a.total);
    double sum = 0;
    int classes = 0;
    for (size_t cls = 0; cls < a.scores.size(); ++cls) {
      size_t pos_n = 0;
      for (int l : a.labels[cls]) pos_n += static_cast<size_t>(l);
      if (pos_n == 0 || pos_n == a.labels[cls].size()) continue;  // one-class slice
      sum += auroc(a.scores[cls], a.labels[cls]);
      classes += 1;
    }
    if (classes > 0) rep.cat_auroc[name] = sum / classes;
  }
  for (const auto& [name, per_stream] : streams) {
    const Vocabulary* vocab = artifacts.vocabulary(name);
    for (const auto& [j, acc] : per_stream) {
      if (acc.n == 0) continue;
      std::string key = name;
      if (vocab != nullptr && j < vocab->size()) key += ":" + vocab->entries[static_cast<size_t>(j)];
      rep.stream_mse[key] = acc.se / static_cast<double>(acc.n);
    }
  }
  return rep;
}

// ---- frozen-backbone task head ----

double HeadClassifier::score(const Eigen::VectorXd& features) const {
  return sigmoid(w.dot(features) + b);
}

namespace {

// One feature row per cohort row: encoder states mean-pooled over the prompt.
Eigen::MatrixXd pooled_features(const Model& model, const std::vector<CohortRow>& cohort) {
  const int64_t msl = model.config().max_seq_len;
  const auto d = static_cast<Eigen::Index>(model.config().hidden_dim);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(cohort.size()), d);
  const size_t chunk = 32;
  for (size_t at = 0; at < cohort.size(); at += chunk) {
    size_t end = std::min(at + chunk, cohort.size());
    std::vector<SubjectSequence> prompts;
    prompts.reserve(end - at);
    for (size_t i = at; i < end; ++i) prompts.push_back(cohort_prompt(cohort[i], msl));
    std::vector<const SubjectSequence*> ptrs;
    for (const auto& s : prompts) ptrs.push_back(&s);
    SparseBatch batch = collate(ptrs, static_cast<size_t>(msl), CollateMode::Eval);
    Eigen::MatrixXd h = model.hidden(batch);
    for (size_t i = at; i < end; ++i) {
      size_t b = i - at;
      Eigen::RowVectorXd pooled = Eigen::RowVectorXd::Zero(d);
      size_t live = 0;
      for (size_t s = 0; s < batch.S; ++s) {
        if (!batch.live(b, s)) continue;
        pooled += h.row(static_cast<Eigen::Index>(batch.at(b, s)));
        ++live;
      }
      x.row(static_cast<Eigen::Index>(i)) = pooled / static_cast<double>(std::max<size_t>(live, 1));
    }
  }
  return x;
}

}  // namespace

FinetuneReport finetune_head(const Model& model, const std::vector<CohortRow>& cohort,
                             const std::vector<size_t>& train_rows, int epochs, double lr) {
  if (train_rows.empty()) fail(ErrKind::EmptySplit, "no train rows");
  std::vector<char> is_train(cohort.size(), 0);
  for (size_t i : train_rows) {
    if (i >= cohort.size()) fail(ErrKind::IndexOutOfRange, "train row " + std::to_string(i));
    is_train[i] = 1;
  }
  int train_pos = 0, train_n = 0;
  for (size_t i = 0; i < cohort.size(); ++i)
    if (is_train[i]) {
      train_pos += cohort[i].label;
      train_n += 1;
    }
  if (train_pos == 0 || train_pos == train_n)
    fail(ErrKind::DegenerateLabels, "train rows hold a single class");
  if (static_cast<size_t>(train_n) == cohort.size())
    fail(ErrKind::EmptySplit, "no held-out rows");

  Eigen::MatrixXd x = pooled_features(model, cohort);
  const Eigen::Index d = x.cols();

  Eigen::MatrixXd xt(train_n, d);
  Eigen::VectorXd yt(train_n);
  std::vector<size_t> held;
  Eigen::Index r = 0;
  for (size_t i = 0; i < cohort.size(); ++i) {
    if (is_train[i]) {
      xt.row(r) = x.row(static_cast<Eigen::Index>(i));
      yt(r) = cohort[i].label;
      ++r;
    } else {
      held.push_back(i);
    }
  }

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0;
  auto n = static_cast<double>(train_n);
  for (int e = 0; e < epochs; ++e) {
    Eigen::VectorXd z = xt * w;
    z.array() += b;
    Eigen::VectorXd p = z.unaryExpr([](double v) { return sigmoid(v); });
    Eigen::VectorXd g = p - yt;
    w -= lr / n * (xt.transpose() * g);
    b -= lr / n * g.sum();
  }

  FinetuneReport rep;
  rep.head.w = w;
  rep.head.b = b;
  rep.n_train = static_cast<size_t>(train_n);
  rep.n_heldout = held.size();
  {
    Eigen::VectorXd z = xt * w;
    z.array() += b;
    double acc = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) acc += softplus(z(i)) - z(i) * yt(i);
    rep.train_nll = acc / n;
  }
  std::vector<double> scores;
  std::vector<int> labels;
  for (size_t i : held) {
    scores.push_back(sigmoid(w.dot(x.row(static_cast<Eigen::Index>(i))) + b));
    labels.push_back(cohort[i].label);
  }
  rep.auroc = auroc(scores, labels);
  rep.accuracy = accuracy_at(scores, labels, 0.5);
  return rep;
}

// ---- zero-shot via generated trajectories ----

namespace {

// Window start is the prompt's final timestamp; an event beyond the end
// proves the window was fully sampled.
bool window_covered(const GeneratedTrajectory& t, double end) {
  return t.stop_reason == StopReason::MaxHorizon ||
         (!t.events.empty() && t.events.back().time > end);
}

}  // namespace

Labeler event_within_horizon(std::string target_type, double horizon_minutes) {
  return [target = std::move(target_type), horizon = horizon_minutes](
             const GeneratedTrajectory& t) -> Vote {
    if (t.prompt_len == 0 || t.prompt_len > t.events.size())
      fail(ErrKind::Schema, "trajectory has no prompt");
    double end = t.events[t.prompt_len - 1].time + horizon;
    for (size_t k = t.prompt_len; k < t.events.size(); ++k) {
      const GeneratedEvent& ev = t.events[k];
      if (ev.time > end) break;
      for (const auto& o : ev.observations)
        if (o.measurement == kEventTypeMeasurement && o.key == target) return Vote::Positive;
    }
    return window_covered(t, end) ? Vote::Negative : Vote::Abstain;
  };
}

Labeler value_threshold_within_horizon(std::string measurement, std::string key,
                                       double threshold, double horizon_minutes) {
  return [m = std::move(measurement), k = std::move(key), threshold,
          horizon = horizon_minutes](const GeneratedTrajectory& t) -> Vote {
    if (t.prompt_len == 0 || t.prompt_len > t.events.size())
      fail(ErrKind::Schema, "trajectory has no prompt");
    double end = t.events[t.prompt_len - 1].time + horizon;
    for (size_t i = t.prompt_len; i < t.events.size(); ++i) {
      const GeneratedEvent& ev = t.events[i];
      if (ev.time > end) break;
      for (const auto& o : ev.observations)
        if (o.measurement == m && (k.empty() || o.key == k) && o.has_value &&
            o.raw_value >= threshold)
          return Vote::Positive;
    }
    return window_covered(t, end) ? Vote::Negative : Vote::Abstain;
  };
}

Labeler labeler_for(const TaskSpec& task) {
  if (task.kind == "event_within_horizon") {
    if (task.target_type.empty()) fail(ErrKind::Schema, "task '" + task.name + "' has no target type");
    return event_within_horizon(task.target_type, task.horizon_minutes);
  }
  fail(ErrKind::Schema, "task kind '" + task.kind + "' has no trajectory labeler");
}

ZeroShotReport zero_shot(const Model& model, const std::vector<CohortRow>& cohort,
                         const Labeler& labeler, double horizon_minutes,
                         const std::vector<MeasurementConfig>& measurements,
                         const FitArtifacts& artifacts, const ZeroShotOptions& options) {
  if (cohort.empty()) fail(ErrKind::EmptySplit, "empty cohort");
  if (options.n_samples < 1) fail(ErrKind::Schema, "n_samples must be positive");
  if (!(horizon_minutes > 0)) fail(ErrKind::Schema, "horizon must be positive");
  const int64_t msl = model.config().max_seq_len;

  ZeroShotReport rep;
  rep.rows.resize(cohort.size());
  rep.n_samples = options.n_samples;
  rep.seed = options.seed;

  auto run_row = [&](size_t i) {
    const CohortRow& row = cohort[i];
    SubjectSequence prompt = cohort_prompt(row, msl);
    GenerateOptions go;
    go.max_events = options.max_events_per_sample;
    go.temperature = options.temperature;
    // generation clocks from the prompt's last event, which may precede the
    // row's prompt end; stretch so the full window is reachable
    go.max_horizon_minutes = (row.prompt_end - prompt.event_times.back()) + horizon_minutes;

    ZeroShotRow out;
    out.subject = row.subject;
    out.prompt_end = row.prompt_end;
    out.label = row.label;
    uint64_t row_seed = mix64(options.seed, static_cast<uint64_t>(i));
    for (int j = 0; j < options.n_samples; ++j) {
      GeneratedTrajectory t = generate_trajectory(model, prompt, measurements, artifacts,
                                                  mix64(row_seed, static_cast<uint64_t>(j)), go);
      switch (labeler(t)) {
        case Vote::Positive: out.positives += 1; break;
        case Vote::Negative: out.negatives += 1; break;
        case Vote::Abstain: out.abstains += 1; break;
      }
    }
    out.probability = out.decided()
                          ? static_cast<double>(out.positives) /
                                static_cast<double>(out.positives + out.negatives)
                          : kAbsent;
    rep.rows[i] = std::move(out);
  };

  int threads = std::max(options.threads, 1);
  if (threads == 1 || cohort.size() < 2) {
    for (size_t i = 0; i < cohort.size(); ++i) run_row(i);
  } else {
    threads = static_cast<int>(std::min<size_t>(static_cast<size_t>(threads), cohort.size()));
    std::mutex mu;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t]() {
        for (size_t i = static_cast<size_t>(t); i < cohort.size(); i += static_cast<size_t>(threads)) {
          try {
            run_row(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(mu);
            if (!first_error) first_error = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : rep.rows) {
    if (r.decided()) {
      rep.decided_rows += 1;
      scores.push_back(r.probability);
      labels.push_back(r.label);
    } else {
      rep.abstained_rows += 1;
    }
  }
  if (rep.decided_rows == 0) fail(ErrKind::AllAbstain, "every cohort row abstained");
  rep.auroc = auroc(scores, labels);
  rep.accuracy = accuracy_at(scores, labels, 0.5);
  return rep;
}

// ---- json reports ----

std::string report_to_json(const GenerativeReport& report) {
  json j;
  j["total_nll"] = report.total_nll;
  j["transitions"] = report.transitions;
  j["n_sequences"] = report.n_sequences;
  j["n_events"] = report.n_events;
  j["by_head"] = report.by_head;
  j["cat_accuracy"] = report.cat_accuracy;
  j["cat_auroc"] = report.cat_auroc;
  j["stream_mse"] = report.stream_mse;
  return j.dump(2);
}

std::string report_to_json(const FinetuneReport& report) {
  json j;
  j["n_train"] = report.n_train;
  j["n_heldout"] = report.n_heldout;
  j["train_nll"] = report.train_nll;
  j["auroc"] = report.auroc;
  j["accuracy"] = report.accuracy;
  j["bias"] = report.head.b;
  j["weights"] = std::vector<double>(report.head.w.data(), report.head.w.data() + report.head.w.size());
  return j.dump(2);
}

std::string report_to_json(const ZeroShotReport& report) {
  json j;
  j["n_samples"] = report.n_samples;
  j["seed"] = report.seed;
  j["decided_rows"] = report.decided_rows;
  j["abstained_rows"] = report.abstained_rows;
  j["auroc"] = report.auroc;
  j["accuracy"] = report.accuracy;
  json rows = json::array();
  for (const auto& r : report.rows) {
    json row;
    row["subject"] = r.subject;
    row["prompt_end"] = r.prompt_end;
    row["label"] = r.label;
    row["positives"] = r.positives;
    row["negatives"] = r.negatives;
    row["abstains"] = r.abstains;
    if (r.decided())
      row["probability"] = r.probability;
    else
      row["probability"] = nullptr;
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  return j.dump(2);
}

}  // namespace evseq
