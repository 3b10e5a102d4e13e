#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evseq/model.hpp"
#include "evseq/preprocess.hpp"
#include "evseq/represent.hpp"

namespace evseq {

// One sampled observation of a generated event. Indicator observations carry
// no value; valued ones keep both the model-space value and its raw units.
struct SampledObs {
  std::string measurement;
  std::string key;             // empty for unkeyed streams
  int64_t index = 0;           // global feature index
  double value = kAbsent;      // normalized
  double raw_value = kAbsent;  // denormalized via the fitted stats
  bool has_value = false;
};

struct GeneratedEvent {
  double time = 0;  // minutes
  std::vector<SampledObs> observations;
};

enum class StopReason { MaxEvents, MaxHorizon };

struct GeneratedTrajectory {
  uint64_t subject_id = 0;
  size_t prompt_len = 0;
  // The prompt echoed back, then the sampled continuation.
  std::vector<GeneratedEvent> events;
  uint64_t rng_seed = 0;
  StopReason stop_reason = StopReason::MaxEvents;
};

struct GenerateOptions {
  int64_t max_events = 0;
  double max_horizon_minutes = std::numeric_limits<double>::infinity();
  // Tempered sampling p^(1/T): logits divide by T, variances scale by T.
  double temperature = 1.0;
};

// Draw a gap from a mixture emission row [component logits | mu | log sigma]:
// pick a component, then exponentiate a normal draw.
double sample_tte(const Eigen::RowVectorXd& params, Rng& rng, double temperature = 1.0);

// Functional time-dependent features at an arbitrary time, in measurement
// order: age from the subject's raw birth minutes (normalized by the fitted
// stats) and the six-hour clock bucket. Matches what serialization stores for
// observed events.
std::vector<SampledObs> compute_functional_features(
    double time_minutes, const SubjectSequence& subject,
    const std::vector<MeasurementConfig>& measurements, const FitArtifacts& artifacts,
    const FeatureManifest& manifest);

// Sample the event after `history`: gap first, functional features at the new
// time, then dynamic covariates stage by stage along the dependency graph
// (single stage in the conditionally independent mode). Earlier-stage draws
// are visible when later stages sample.
GeneratedEvent generate_next_event(const Model& model, const SubjectSequence& history,
                                   const std::vector<MeasurementConfig>& measurements,
                                   const FitArtifacts& artifacts, Rng& rng,
                                   double temperature = 1.0);

// Roll the model forward from a prompt until max_events are drawn or the
// sampled clock leaves the horizon (measured from the prompt's last event).
// Context slides once the working sequence outgrows max_seq_len.
GeneratedTrajectory generate_trajectory(const Model& model, const SubjectSequence& prompt,
                                        const std::vector<MeasurementConfig>& measurements,
                                        const FitArtifacts& artifacts, uint64_t seed,
                                        const GenerateOptions& options);

// One trajectory per prompt, each on its own rng stream derived from
// (seed, prompt index), so results do not depend on evaluation order.
std::vector<GeneratedTrajectory> generate_trajectories(
    const Model& model, const std::vector<const SubjectSequence*>& prompts,
    const std::vector<MeasurementConfig>& measurements, const FitArtifacts& artifacts,
    uint64_t seed, const GenerateOptions& options);

// JSON object for one trajectory; write_trajectories emits one per line.
std::string trajectory_to_json(const GeneratedTrajectory& trajectory);
void write_trajectories(const std::string& path,
                        const std::vector<GeneratedTrajectory>& trajectories);

}  // namespace evseq
