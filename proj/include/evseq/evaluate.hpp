#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evseq/data.hpp"
#include "evseq/generate.hpp"
#include "evseq/model.hpp"
#include "evseq/preprocess.hpp"

namespace evseq {

// Prediction task over a cohort of (subject, prompt end) rows with binary
// labels. The csv holds the cohort; a sibling .json header, when present,
// carries the task definition (kind, target, horizon).
struct TaskSpec {
  std::string name;
  std::string kind;  // "event_within_horizon" or "static_key_equals"
  std::string target_type;
  std::vector<std::string> anchor_types;
  double horizon_minutes = 0;
  std::string static_measurement, static_key;

  struct Row {
    std::string subject;    // raw id, as written in the source tables
    double prompt_end = 0;  // minutes
    int label = 0;
  };
  std::vector<Row> rows;
};

// Reads cohort csv (subject_id, prompt_end_time, label) plus the sibling
// header <stem>.json when it exists. Timestamps accept the same formats as
// event ingestion.
TaskSpec load_task(const std::string& csv_path);

// Raw subject id -> canonical id, for joining task rows against sequences.
std::map<std::string, uint64_t> subject_id_map(const InternalDataModel& model);

// A task row joined to its sequence. prompt_len counts the events at or
// before the row's prompt end and must be positive; rows may anchor at the
// subject's final event, since labels can depend on the unrecorded future.
struct CohortRow {
  const SubjectSequence* sequence = nullptr;
  std::string subject;
  size_t prompt_len = 0;
  double prompt_end = 0;
  int label = 0;
};

std::vector<CohortRow> resolve_cohort(const TaskSpec& task,
                                      const std::vector<SubjectSequence>& sequences,
                                      const std::map<std::string, uint64_t>& ids);

// The prompt as a standalone sequence, truncated to the most recent
// max_seq_len events when the prompt is longer.
SubjectSequence cohort_prompt(const CohortRow& row, int64_t max_seq_len);

// ---- teacher-forced generative metrics ----

struct GenerativeReport {
  double total_nll = 0;
  std::map<std::string, double> by_head;  // per-head nll, keys as in NllResult
  std::map<std::string, double> cat_accuracy;
  std::map<std::string, double> cat_auroc;  // macro one-vs-rest, midrank ties
  // Squared error of the predicted mean on normalized values, keyed
  // "<measurement>" or "<measurement>:<stream>".
  std::map<std::string, double> stream_mse;
  int64_t transitions = 0;
  size_t n_sequences = 0, n_events = 0;
};

// Metrics do not depend on batch_size or on the order of `sequences`; every
// per-transition term is pooled before averaging.
GenerativeReport eval_generative(const Model& model,
                                 const std::vector<SubjectSequence>& sequences,
                                 const FitArtifacts& artifacts, size_t batch_size = 32);

// ---- frozen-backbone task head ----

struct HeadClassifier {
  Eigen::VectorXd w;
  double b = 0;
  double score(const Eigen::VectorXd& features) const;
};

struct FinetuneReport {
  HeadClassifier head;
  double train_nll = 0;  // final logistic loss over the train rows
  double auroc = 0, accuracy = 0;  // held-out rows, threshold 0.5
  size_t n_train = 0, n_heldout = 0;
};

// Mean-pools the encoder states over each prompt and fits a logistic head by
// full-batch gradient descent; the backbone stays frozen. `train_rows`
// indexes `cohort`; every other row is held out for the reported metrics.
FinetuneReport finetune_head(const Model& model, const std::vector<CohortRow>& cohort,
                             const std::vector<size_t>& train_rows, int epochs = 400,
                             double lr = 0.5);

// ---- zero-shot via generated trajectories ----

enum class Vote { Positive, Negative, Abstain };

// Deterministic verdict on one trajectory; must only inspect the continuation
// (events from prompt_len on) plus the prompt's final timestamp.
using Labeler = std::function<Vote(const GeneratedTrajectory&)>;

// Positive when an event of target_type lands within horizon_minutes of the
// prompt's last event; negative once the window is provably covered (the
// sampler ran past it); abstain when the event budget ran out inside it.
Labeler event_within_horizon(std::string target_type, double horizon_minutes);

// Same window; fires on an observed value of measurement (and key, when
// non-empty) at or above threshold, in raw units.
Labeler value_threshold_within_horizon(std::string measurement, std::string key,
                                       double threshold, double horizon_minutes);

// Built-in labeler named by the task header. Tasks over statics have no
// trajectory labeler and are rejected.
Labeler labeler_for(const TaskSpec& task);

struct ZeroShotRow {
  std::string subject;
  double prompt_end = 0;
  int label = 0;
  int positives = 0, negatives = 0, abstains = 0;
  double probability = 0;  // positives / decided samples; NaN when none decided
  bool decided() const { return positives + negatives > 0; }
};

struct ZeroShotReport {
  std::vector<ZeroShotRow> rows;  // cohort order
  size_t decided_rows = 0, abstained_rows = 0;
  double auroc = 0, accuracy = 0;  // decided rows only, threshold 0.5
  int n_samples = 0;
  uint64_t seed = 0;
};

struct ZeroShotOptions {
  int n_samples = 16;
  uint64_t seed = 1;
  int64_t max_events_per_sample = 64;
  double temperature = 1.0;
  int threads = 1;
};

// For each cohort row: n_samples trajectories from the truncated prompt, each
// on rng stream (seed, row, sample), mapped through the labeler. Probability
// is the decided-sample fraction, so pooling two runs' counts averages their
// probabilities exactly. Rows are independent; `threads` only shards them.
ZeroShotReport zero_shot(const Model& model, const std::vector<CohortRow>& cohort,
                         const Labeler& labeler, double horizon_minutes,
                         const std::vector<MeasurementConfig>& measurements,
                         const FitArtifacts& artifacts, const ZeroShotOptions& options);

std::string report_to_json(const GenerativeReport& report);
std::string report_to_json(const FinetuneReport& report);
std::string report_to_json(const ZeroShotReport& report);

}  // namespace evseq
