#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "evseq/config.hpp"
#include "evseq/data.hpp"
#include "evseq/preprocess.hpp"

namespace evseq {

// One contiguous block of the global feature index space. Keyed measurements
// span their whole vocabulary (UNK first); numeric streams take one slot.
struct FeatureBlock {
  std::string measurement;
  bool keyed = false;
  int64_t offset = 0;
  int64_t size = 0;
};

struct FeatureManifest {
  int64_t total = 0;                 // V; index 0 is the padding sentinel
  std::vector<FeatureBlock> blocks;  // measurement config order
  int64_t max_events = 0;            // dataset maxima, filled when sequences are built
  int64_t max_obs = 0;

  const FeatureBlock* block(const std::string& measurement) const;
  int64_t index_of(const std::string& measurement, int64_t key_index) const;
  std::pair<const FeatureBlock*, int64_t> locate(int64_t global_index) const;
};

FeatureManifest build_manifest(const DatasetConfig& config, const FitArtifacts& artifacts);
std::string serialize_manifest(const FeatureManifest& manifest);
FeatureManifest parse_manifest(const std::string& text);
uint64_t manifest_hash(const FeatureManifest& manifest);

// A subject's full history as one ragged row. Each event's observation list
// starts with its event type and the functional time-dependent features, then
// the recorded measurements in row order.
struct SubjectSequence {
  uint64_t subject_id = 0;
  double dob_minutes = kAbsent;  // raw minutes, kept for regenerating features
  std::vector<int64_t> static_indices;
  std::vector<double> event_times;  // ascending; simultaneous events keep id order
  std::vector<std::vector<int64_t>> obs_indices;  // global feature indices
  std::vector<std::vector<double>> obs_values;    // aligned, NaN where absent
  std::vector<std::vector<uint8_t>> obs_mask;     // aligned, 1 = value present

  size_t n_events() const { return event_times.size(); }
  size_t n_obs() const;
};

// One sequence per subject holding at least one event; subjects with none are
// excluded and counted in the report.
std::vector<SubjectSequence> serialize_subjects(const InternalDataModel& model,
                                                const DatasetConfig& config,
                                                const FitArtifacts& artifacts,
                                                const FeatureManifest& manifest,
                                                DropReport& report);

enum class CollateMode { Train, Eval };

// Fixed-shape batch whose payload scales with observation count, not with V.
// Cell index 0 marks padding everywhere.
struct SparseBatch {
  size_t B = 0, S = 0, M = 0;
  std::vector<double> time_deltas;     // B*S; first column 0
  std::vector<uint8_t> event_mask;     // B*S
  std::vector<int64_t> obs_indices;    // B*S*M
  std::vector<double> obs_values;      // B*S*M
  std::vector<uint8_t> obs_value_mask; // B*S*M
  std::vector<std::vector<int64_t>> static_indices;  // ragged per subject
  std::vector<uint64_t> subject_ids;

  size_t at(size_t b, size_t s) const { return b * S + s; }
  size_t cell(size_t b, size_t s, size_t m) const { return (b * S + s) * M + m; }
  bool live(size_t b, size_t s) const { return event_mask[at(b, s)] != 0; }
};

// Train mode truncates long sequences to a uniform-random contiguous window
// (rng required); Eval keeps the most recent window.
SparseBatch collate(const std::vector<const SubjectSequence*>& sequences, size_t max_seq_len,
                    CollateMode mode, Rng* rng = nullptr);

// Sum-pooled event embeddings, (B*S)xd with row b*S+s. Observations with a
// value scale their embedding row by it; indicator observations weigh 1; the
// subject's statics (via static_table) are added at every live position.
Eigen::MatrixXd embed_batch(const SparseBatch& batch, const Eigen::MatrixXd& table,
                            const Eigen::MatrixXd& static_table);

struct SequenceDataset {
  FeatureManifest manifest;
  std::array<std::vector<SubjectSequence>, 3> splits;  // indexed by Split
};

SequenceDataset build_sequences(const InternalDataModel& model, const DatasetConfig& config,
                                const FitArtifacts& artifacts, DropReport& report);

// manifest.json plus one parquet file of ragged rows per split.
void write_sequence_dataset(const std::string& dir, const SequenceDataset& dataset);
SequenceDataset read_sequence_dataset(const std::string& dir);

}  // namespace evseq
