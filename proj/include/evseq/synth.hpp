#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evseq/common.hpp"
#include "evseq/config.hpp"

namespace evseq {

// Inter-event time distribution. The log-normal mixture matches the model's
// emission family exactly, which makes likelihood-recovery tests sharp; the
// exponential kind gives closed-form Poisson counts over a window.
struct TteSpec {
  enum class Kind { Exponential, LognormalMixture };
  struct Component {
    double weight = 1, mu = 0, sigma = 1;  // mu/sigma in log-minutes
  };
  Kind kind = Kind::Exponential;
  double mean_minutes = 720;
  std::vector<Component> components;

  double mean() const;
  double sample(Rng& rng) const;
  double nll(double delta_minutes) const;
};

struct ValueParams {
  double mean = 0, stddev = 1;
};

// Registry entry for one measurement the generator can emit.
struct OracleMeasurement {
  std::string name;
  ValueKind kind = ValueKind::Categorical;
  bool is_static = false;
  std::vector<std::pair<std::string, double>> keys;  // static sampling weights
  std::map<std::string, ValueParams> key_values;     // multivariate per-key values
  ValueParams value;                                 // univariate values
};

// Per-event-type emission menu entry: n_per_event draws of one measurement.
struct MenuSpec {
  std::string measurement;
  int64_t n_per_event = 1;
  std::vector<std::pair<std::string, double>> keys;  // categorical/multivariate draws
};

// Intra-event dependency: a triggering observation deterministically (or with
// bounded noise) adds a target observation to the same event.
struct RuleSpec {
  enum class Effect { EmitKey, EmitValue, ScaleValue };
  std::string trigger_measurement, trigger_key;
  Effect effect = Effect::EmitKey;
  std::string target_measurement, target_key;
  double value_mean = 0, noise_stddev = 0, factor = 1;
};

struct EventTypeSpec {
  std::string name;
  double weight = 1;  // initial-type distribution
  std::vector<std::pair<std::string, double>> transitions;
  std::optional<TteSpec> tte;  // default: exponential at base_rate
  std::vector<MenuSpec> menu;
};

struct OracleTask {
  enum class Kind { EventWithinHorizon, StaticKeyEquals };
  std::string name;
  Kind kind = Kind::EventWithinHorizon;
  std::vector<std::string> anchor_types;  // empty = any event anchors
  std::string target_type;
  double horizon_minutes = 1440;
  std::string static_measurement, static_key;
};

struct OracleSpec {
  uint64_t n_subjects = 10;
  uint64_t seed = 1;
  double base_rate = 24;  // events/day
  // exactly one of: fixed event count per subject, or a sampling window
  int64_t events_per_subject = 0;
  double horizon_days = 0;
  double start_minutes = 0;
  bool emit_dob = true;
  double dob_mean_age_years = 40, dob_stddev_years = 10;
  std::vector<OracleMeasurement> measurements;
  std::vector<EventTypeSpec> event_types;
  std::vector<RuleSpec> rules;
  std::vector<OracleTask> tasks;

  // knobs for the paired dataset configuration written next to the data
  std::vector<std::string> functional_features;
  std::array<double, 3> split_fractions = {0.8, 0.1, 0.1};
  uint64_t min_frequency = 0;

  const OracleMeasurement* find_measurement(const std::string& name) const;
  const EventTypeSpec* find_type(const std::string& name) const;
  const TteSpec& tte_of(const EventTypeSpec& t) const;
};

OracleSpec parse_oracle_spec(const std::string& text);
OracleSpec load_oracle_spec(const std::string& path);

struct OracleSummary {
  uint64_t n_subjects = 0, n_events = 0, n_obs_rows = 0, n_static_rows = 0;
  std::map<std::string, uint64_t> obs_rows_per_measurement;
  std::map<std::string, uint64_t> events_per_type;
  std::map<std::string, std::pair<uint64_t, uint64_t>> task_rows;  // rows, positives
};

// Writes CSV sources (subjects, events, one observation file per dynamic
// measurement), task files, the paired dataset_config.yaml, and a
// ground-truth sidecar.json. Fully deterministic per seed.
OracleSummary sample_dataset(const OracleSpec& spec, const std::string& out_dir);

// The paired dataset configuration (same object sample_dataset serializes).
DatasetConfig paired_dataset_config(const OracleSpec& spec);

struct BayesReference {
  double auroc = 0;
  size_t n_rows = 0;
  double mean_probability = 0;
};

// Best-achievable zero-shot score for an event task, estimated by Monte-Carlo
// rollouts of the true dynamics from each cohort row's anchor state.
BayesReference bayes_reference(const OracleSpec& spec, const std::string& out_dir,
                               const std::string& task_name, int n_samples, uint64_t seed);

}  // namespace evseq
