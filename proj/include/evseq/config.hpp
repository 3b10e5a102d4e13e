#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "evseq/common.hpp"

namespace evseq {

enum class Temporality { Static, Dynamic, FunctionalTimeDependent };
enum class ValueKind { Categorical, UnivariateRegression, MultivariateRegression };
enum class SourceFormat { Csv, Parquet };
enum class PartSelector { Whole, CategoricalOnly, NumericalOnly };
enum class EventMode { ConditionallyIndependent, NestedAttention };

const char* to_string(Temporality t);
const char* to_string(ValueKind k);
const char* to_string(SourceFormat f);
const char* to_string(PartSelector p);
const char* to_string(EventMode m);

// Feature functions computable from (subject, timestamp) alone. Measurements
// with functional_time_dependent temporality must use one of these names.
const std::vector<std::string>& functional_feature_names();

struct SourceConfig {
  std::string name;
  std::string path;
  SourceFormat format = SourceFormat::Csv;
  std::string subject_id_column;
  // Empty timestamp_column marks a static source (one row per subject).
  std::string timestamp_column;
  // Event type for rows of this source: a literal (defaults to the source
  // name) or a column holding per-row types. Mutually exclusive.
  std::string event_type;
  std::string event_type_column;

  bool is_static() const { return timestamp_column.empty(); }
  bool operator==(const SourceConfig&) const = default;
};

struct MeasurementConfig {
  std::string name;
  Temporality temporality = Temporality::Dynamic;
  ValueKind value_kind = ValueKind::Categorical;
  uint64_t min_frequency = 0;
  std::optional<std::pair<double, double>> censor_bounds;
  std::string source_table;  // empty for functional_time_dependent
  // key_column holds the observation itself (category label or numeric value);
  // for multivariate_regression it holds the key and value_column the value.
  std::string key_column;
  std::string value_column;
  // True for the always-present event_type measurement, injected at parse time
  // and skipped on serialization.
  bool implicit = false;

  bool operator==(const MeasurementConfig&) const = default;
};

// Name of the injected categorical measurement carrying each event's type.
inline const char* kEventTypeMeasurement = "event_type";

struct DepTarget {
  std::string measurement;
  PartSelector part = PartSelector::Whole;
  bool operator==(const DepTarget&) const = default;
};

struct DependencyGraph {
  // stages[0] holds functional time-dependent features; later stages emit in
  // order, each conditioned on all earlier ones.
  std::vector<std::vector<DepTarget>> stages;
  bool operator==(const DependencyGraph&) const = default;
};

struct ModelConfig {
  EventMode mode = EventMode::ConditionallyIndependent;
  DependencyGraph dependency_graph;  // nested_attention only
  int64_t hidden_dim = 64;
  int64_t num_layers = 2;
  int64_t num_heads = 4;
  int64_t max_seq_len = 128;
  int64_t tte_mixture_components = 4;
  double learning_rate = 1e-3;
  // Filled by the dataset build; keys are measurement names.
  std::map<std::string, int64_t> measurement_vocab_sizes;

  bool operator==(const ModelConfig&) const = default;
};

struct DatasetConfig {
  std::vector<SourceConfig> sources;
  std::vector<MeasurementConfig> measurements;
  std::array<double, 3> split_fractions = {0.8, 0.1, 0.1};
  uint64_t seed = 1;
  double outlier_stddev_cutoff = 5.0;
  std::optional<ModelConfig> model;

  const SourceConfig* find_source(const std::string& name) const;
  const MeasurementConfig* find_measurement(const std::string& name) const;
  bool operator==(const DatasetConfig&) const = default;
};

// Parses and fully validates a dataset configuration document. Defaults are
// materialized and the implicit event_type measurement injected, so the
// result is usable without further checks.
DatasetConfig parse_dataset_config(const std::string& text);
DatasetConfig load_dataset_config(const std::string& path);

// Canonical form; parse(serialize(c)) == c for validated configs.
std::string serialize_dataset_config(const DatasetConfig& config);

ModelConfig parse_model_config(const std::string& text);
ModelConfig load_model_config(const std::string& path);
std::string serialize_model_config(const ModelConfig& config);

// Resolves every target against the measurement list and checks stage rules:
// stage 0 is reserved for functional features, every modeled measurement part
// is covered exactly once, and a numeric part never precedes its key part.
DependencyGraph validate_dependency_graph(const DependencyGraph& graph,
                                          const std::vector<MeasurementConfig>& measurements);

// Checks model dimensions and, for nested_attention, the dependency graph
// against the measurement list (pass empty list to skip graph resolution).
void validate_model_config(const ModelConfig& config,
                           const std::vector<MeasurementConfig>& measurements);

uint64_t config_hash(const DatasetConfig& config);
uint64_t config_hash(const ModelConfig& config);

}  // namespace evseq
