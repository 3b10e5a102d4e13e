#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evseq/autodiff.hpp"
#include "evseq/config.hpp"
#include "evseq/represent.hpp"

namespace evseq {

// Sinusoidal features of log1p(delta): d/2 frequency bands with periods
// geometric from 1 minute to 10 years, sin block then cos block.
Eigen::MatrixXd temporal_encode(const std::vector<double>& deltas_minutes, int64_t dim);

// Transitions with a recorded gap of zero (merged same-timestamp events) are
// clamped to this delta before entering the time-to-event likelihood.
constexpr double kMinTteDelta = 1e-3;  // minutes

struct LayerParams {
  Eigen::MatrixXd ln1_g, ln1_b, wq, wk, wv, wo;
  Eigen::MatrixXd ln2_g, ln2_b, w1, b1, w2, b2;
};

// Single inner attention layer for the nested mode. wo starts at zero, so an
// untrained inner pass is the identity on the per-stage head inputs.
struct InnerParams {
  Eigen::MatrixXd wq, wk, wv, wo;
  Eigen::MatrixXd stage_pos;  // one row per stage token
};

struct HeadParams {
  Eigen::MatrixXd w, b;
};

struct ModelParams {
  Eigen::MatrixXd embed, static_embed;  // VxD
  std::vector<LayerParams> layers;
  Eigen::MatrixXd final_g, final_b;
  HeadParams tte;                                  // Dx3K
  std::map<std::string, HeadParams> cat_heads;      // Dx(C+1); absent slot last
  std::map<std::string, HeadParams> presence_heads; // DxC, one logit per stream
  std::map<std::string, HeadParams> value_heads;    // Dx2C: means then log-scales
  InnerParams inner;  // nested_attention only, matrices empty otherwise
};

// Row b*S+s parameterizes the distribution of event s+1 given events 0..s.
struct Emissions {
  size_t B = 0, S = 0;
  Eigen::MatrixXd tte;  // (B*S)x3K: component logits, means, log-scales
  std::map<std::string, Eigen::MatrixXd> categorical;  // (B*S)x(C+1)
  // (B*S)x3C: presence logits, then means, then log-scales per stream.
  std::map<std::string, Eigen::MatrixXd> numeric;
};

struct NllResult {
  double total = 0;
  std::map<std::string, double> by_head;  // "tte", "<m>", "<m>:presence", "<m>:value"
  int64_t transitions = 0;
};

class Model {
 public:
  Model(const ModelConfig& config, const std::vector<MeasurementConfig>& measurements,
        const FeatureManifest& manifest, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const FeatureManifest& manifest() const { return manifest_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  int64_t step() const { return step_; }

  Emissions forward(const SparseBatch& batch) const;

  // Mean over transitions (live event followed by a live event) of the full
  // next-event negative log-likelihood. A batch with no transition yields 0.
  NllResult nll(const SparseBatch& batch) const;

  // One Adam step (beta 0.9/0.999, eps 1e-8) on the nll gradient.
  NllResult train_step(const SparseBatch& batch, double lr);

  // nll gradient per tensor, aligned with param_list(). Empty when the batch
  // has no transition.
  std::vector<Eigen::MatrixXd> gradients(const SparseBatch& batch) const;

  // Final encoder states, (B*S)xD; row b*S+s summarizes events 0..s of
  // sequence b. Padding rows are whatever the encoder leaves there.
  Eigen::MatrixXd hidden(const SparseBatch& batch) const;

  void save(const std::string& path) const;
  // Refuses a checkpoint whose stored manifest hash differs from `manifest`.
  static Model load(const std::string& path, const std::vector<MeasurementConfig>& measurements,
                    const FeatureManifest& manifest);

  // Parameter tensors in checkpoint order.
  std::vector<Eigen::MatrixXd*> param_list();
  std::vector<const Eigen::MatrixXd*> param_list() const;
  std::vector<std::string> param_names() const;

  // Per-measurement emission routing, aligned with manifest blocks. Stages are
  // -1 outside the nested mode.
  struct Route {
    std::string name;
    ValueKind kind = ValueKind::Categorical;
    bool modeled = false;  // dynamic measurements get heads
    int64_t offset = 0, size = 0;
    int cat_stage = -1, num_stage = -1;
  };
  const std::vector<Route>& routes() const { return routes_; }
  int64_t n_stages() const { return n_stages_; }

 private:
  struct Forward;

  void init_params(uint64_t seed);
  void build_forward(const SparseBatch& batch, Forward& f, bool with_loss) const;

  ModelConfig config_;
  FeatureManifest manifest_;
  uint64_t mhash_ = 0;
  std::vector<Route> routes_;  // aligned with manifest_.blocks
  int64_t n_stages_ = 0;       // nested mode only
  ModelParams params_;
  int64_t step_ = 0;
  std::vector<Eigen::MatrixXd> adam_m_, adam_v_;
};

}  // namespace evseq
