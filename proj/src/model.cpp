#include "evseq/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

namespace evseq {

namespace {

using json = nlohmann::ordered_json;

constexpr double kTenYearsMinutes = 10.0 * 525960.0;
constexpr const char kMagic[8] = {'E', 'V', 'S', 'Q', 'C', 'K', 'P', 'T'};

// One visitation order rules parameter enumeration, checkpoints, and the
// leaf/grad pairing in train_step.
template <typename Params, typename Fn>
void visit_params(Params& p, Fn&& fn) {
  fn("embed", p.embed);
  fn("static_embed", p.static_embed);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    std::string pre = "layer" + std::to_string(l) + ".";
    fn(pre + "ln1_g", layer.ln1_g);
    fn(pre + "ln1_b", layer.ln1_b);
    fn(pre + "wq", layer.wq);
    fn(pre + "wk", layer.wk);
    fn(pre + "wv", layer.wv);
    fn(pre + "wo", layer.wo);
    fn(pre + "ln2_g", layer.ln2_g);
    fn(pre + "ln2_b", layer.ln2_b);
    fn(pre + "w1", layer.w1);
    fn(pre + "b1", layer.b1);
    fn(pre + "w2", layer.w2);
    fn(pre + "b2", layer.b2);
  }
  fn("final_g", p.final_g);
  fn("final_b", p.final_b);
  fn("tte.w", p.tte.w);
  fn("tte.b", p.tte.b);
  for (auto& [name, h] : p.cat_heads) {
    fn("cat." + name + ".w", h.w);
    fn("cat." + name + ".b", h.b);
  }
  for (auto& [name, h] : p.presence_heads) {
    fn("presence." + name + ".w", h.w);
    fn("presence." + name + ".b", h.b);
  }
  for (auto& [name, h] : p.value_heads) {
    fn("value." + name + ".w", h.w);
    fn("value." + name + ".b", h.b);
  }
  if (p.inner.wq.size() != 0) {
    fn("inner.wq", p.inner.wq);
    fn("inner.wk", p.inner.wk);
    fn("inner.wv", p.inner.wv);
    fn("inner.wo", p.inner.wo);
    fn("inner.stage_pos", p.inner.stage_pos);
  }
}

}  // namespace

Eigen::MatrixXd temporal_encode(const std::vector<double>& deltas_minutes, int64_t dim) {
  if (dim < 2 || dim % 2 != 0)
    fail(ErrKind::ShapeMismatch, "temporal_encode: dim must be even and >= 2");
  Eigen::Index nb = dim / 2;
  std::vector<double> omega(static_cast<size_t>(nb));
  for (Eigen::Index j = 0; j < nb; ++j) {
    double frac = nb == 1 ? 1.0 : static_cast<double>(j) / static_cast<double>(nb - 1);
    double period = std::pow(kTenYearsMinutes, frac);  // 1 minute .. 10 years
    omega[static_cast<size_t>(j)] = 2.0 * M_PI / std::log1p(period);
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(deltas_minutes.size()), dim);
  for (size_t n = 0; n < deltas_minutes.size(); ++n) {
    double delta = deltas_minutes[n];
    if (!(delta >= 0))
      fail(ErrKind::NegativeDelta, "temporal_encode: delta " + std::to_string(delta));
    double u = std::log1p(delta);
    auto i = static_cast<Eigen::Index>(n);
    for (Eigen::Index j = 0; j < nb; ++j) {
      out(i, j) = std::sin(u * omega[static_cast<size_t>(j)]);
      out(i, nb + j) = std::cos(u * omega[static_cast<size_t>(j)]);
    }
  }
  return out;
}

Model::Model(const ModelConfig& config, const std::vector<MeasurementConfig>& measurements,
             const FeatureManifest& manifest, uint64_t seed)
    : config_(config), manifest_(manifest), mhash_(manifest_hash(manifest)) {
  validate_model_config(config_, measurements);

  std::map<std::string, const MeasurementConfig*> by_name;
  for (const auto& m : measurements) by_name[m.name] = &m;
  routes_.reserve(manifest_.blocks.size());
  for (const auto& b : manifest_.blocks) {
    auto it = by_name.find(b.measurement);
    if (it == by_name.end())
      fail(ErrKind::Schema, "manifest block '" + b.measurement + "' has no measurement config");
    const MeasurementConfig& mc = *it->second;
    Route r;
    r.name = b.measurement;
    r.kind = mc.value_kind;
    r.modeled = mc.temporality == Temporality::Dynamic;
    r.offset = b.offset;
    r.size = b.size;
    routes_.push_back(std::move(r));
  }

  if (config_.mode == EventMode::NestedAttention) {
    const DependencyGraph& g = config_.dependency_graph;
    n_stages_ = static_cast<int64_t>(g.stages.size());
    auto route_for = [&](const std::string& name) -> Route& {
      for (auto& r : routes_)
        if (r.name == name) return r;
      fail(ErrKind::GraphMismatch, "dependency graph target '" + name + "' not in manifest");
    };
    for (size_t stage = 0; stage < g.stages.size(); ++stage) {
      for (const auto& t : g.stages[stage]) {
        Route& r = route_for(t.measurement);
        auto s = static_cast<int>(stage);
        switch (t.part) {
          case PartSelector::Whole:
            r.cat_stage = s;
            r.num_stage = s;
            break;
          case PartSelector::CategoricalOnly: r.cat_stage = s; break;
          case PartSelector::NumericalOnly: r.num_stage = s; break;
        }
      }
    }
  }

  for (const auto& [name, count] : config_.measurement_vocab_sizes) {
    const FeatureBlock* b = manifest_.block(name);
    if (b != nullptr && b->size > 1 && b->size != count)
      fail(ErrKind::ShapeMismatch, "vocab size of '" + name + "' is " + std::to_string(b->size) +
                                       " in the manifest, " + std::to_string(count) +
                                       " in the model config");
  }

  init_params(seed);
}

void Model::init_params(uint64_t seed) {
  Rng rng(mix64(seed, 0x6d6f64656cULL));
  Eigen::Index d = config_.hidden_dim;
  Eigen::Index v = manifest_.total;
  auto randn = [&rng](Eigen::Index r, Eigen::Index c, double s) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = s * rng.normal();
    return m;
  };

  params_.embed = randn(v, d, 0.02);
  params_.static_embed = randn(v, d, 0.02);
  params_.layers.clear();
  for (int64_t l = 0; l < config_.num_layers; ++l) {
    LayerParams lp;
    lp.ln1_g = Eigen::MatrixXd::Ones(1, d);
    lp.ln1_b = Eigen::MatrixXd::Zero(1, d);
    lp.wq = randn(d, d, 0.02);
    lp.wk = randn(d, d, 0.02);
    lp.wv = randn(d, d, 0.02);
    lp.wo = randn(d, d, 0.02);
    lp.ln2_g = Eigen::MatrixXd::Ones(1, d);
    lp.ln2_b = Eigen::MatrixXd::Zero(1, d);
    lp.w1 = randn(d, 4 * d, 0.02);
    lp.b1 = Eigen::MatrixXd::Zero(1, 4 * d);
    lp.w2 = randn(4 * d, d, 0.02);
    lp.b2 = Eigen::MatrixXd::Zero(1, d);
    params_.layers.push_back(std::move(lp));
  }
  params_.final_g = Eigen::MatrixXd::Ones(1, d);
  params_.final_b = Eigen::MatrixXd::Zero(1, d);

  // Output heads start at zero: uniform categoricals, standard log-normal TTE.
  Eigen::Index k3 = 3 * config_.tte_mixture_components;
  params_.tte = {Eigen::MatrixXd::Zero(d, k3), Eigen::MatrixXd::Zero(1, k3)};
  for (const auto& r : routes_) {
    if (!r.modeled) continue;
    if (r.kind == ValueKind::Categorical) {
      params_.cat_heads[r.name] = {Eigen::MatrixXd::Zero(d, r.size + 1),
                                   Eigen::MatrixXd::Zero(1, r.size + 1)};
    } else {
      params_.presence_heads[r.name] = {Eigen::MatrixXd::Zero(d, r.size),
                                        Eigen::MatrixXd::Zero(1, r.size)};
      params_.value_heads[r.name] = {Eigen::MatrixXd::Zero(d, 2 * r.size),
                                     Eigen::MatrixXd::Zero(1, 2 * r.size)};
    }
  }

  if (config_.mode == EventMode::NestedAttention) {
    params_.inner.wq = randn(d, d, 0.02);
    params_.inner.wk = randn(d, d, 0.02);
    params_.inner.wv = randn(d, d, 0.02);
    params_.inner.wo = Eigen::MatrixXd::Zero(d, d);
    params_.inner.stage_pos = randn(n_stages_, d, 0.02);
  }
}

std::vector<Eigen::MatrixXd*> Model::param_list() {
  std::vector<Eigen::MatrixXd*> out;
  visit_params(params_, [&](const std::string&, Eigen::MatrixXd& m) { out.push_back(&m); });
  return out;
}

std::vector<const Eigen::MatrixXd*> Model::param_list() const {
  std::vector<const Eigen::MatrixXd*> out;
  visit_params(params_, [&](const std::string&, const Eigen::MatrixXd& m) { out.push_back(&m); });
  return out;
}

std::vector<std::string> Model::param_names() const {
  std::vector<std::string> out;
  visit_params(params_, [&](const std::string& n, const Eigen::MatrixXd&) { out.push_back(n); });
  return out;
}

struct Model::Forward {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  ad::Var h{};
  ad::Var tte{};
  std::map<std::string, ad::Var> cat, presence, value;
  ad::Var total{};
  NllResult result;
};

void Model::build_forward(const SparseBatch& batch, Forward& f, bool with_loss) const {
  auto B = static_cast<int64_t>(batch.B);
  auto S = static_cast<int64_t>(batch.S);
  int64_t n = B * S;
  Eigen::Index d = config_.hidden_dim;
  if (batch.static_indices.size() != batch.B)
    fail(ErrKind::ShapeMismatch, "batch static_indices size != B");

  std::unordered_map<const Eigen::MatrixXd*, ad::Var> vars;
  visit_params(params_, [&](const std::string&, const Eigen::MatrixXd& m) {
    ad::Var v = ad::leaf(f.tape, m);
    f.leaves.push_back(v);
    vars.emplace(&m, v);
  });
  auto lv = [&](const Eigen::MatrixXd& m) { return vars.at(&m); };
  auto affine = [&](ad::Var x, const HeadParams& h) {
    return ad::add_rowvec(ad::matmul(x, lv(h.w)), lv(h.b));
  };

  auto route_of = [&](int64_t global) -> const Route& {
    auto [block, within] = manifest_.locate(global);
    (void)within;
    return routes_[static_cast<size_t>(block - manifest_.blocks.data())];
  };

  ad::RowSpec dyn(static_cast<size_t>(n)), stat(static_cast<size_t>(n));
  for (size_t b = 0; b < batch.B; ++b) {
    for (size_t s = 0; s < batch.S; ++s) {
      if (!batch.live(b, s)) continue;
      size_t pos = batch.at(b, s);
      for (size_t m = 0; m < batch.M; ++m) {
        size_t c = batch.cell(b, s, m);
        int64_t idx = batch.obs_indices[c];
        if (idx == 0) continue;
        double w = batch.obs_value_mask[c] ? batch.obs_values[c] : 1.0;
        dyn[pos].emplace_back(idx, w);
      }
      for (int64_t idx : batch.static_indices[b]) stat[pos].emplace_back(idx, 1.0);
    }
  }

  ad::Var x = ad::add(ad::embed_rows(lv(params_.embed), dyn, d),
                      ad::embed_rows(lv(params_.static_embed), stat, d));
  x = ad::add(x, ad::leaf(f.tape, temporal_encode(batch.time_deltas, d)));

  for (const auto& layer : params_.layers) {
    ad::Var a = ad::layernorm_rows(x, lv(layer.ln1_g), lv(layer.ln1_b));
    ad::Var att = ad::causal_attention(ad::matmul(a, lv(layer.wq)), ad::matmul(a, lv(layer.wk)),
                                       ad::matmul(a, lv(layer.wv)), B, S, config_.num_heads);
    x = ad::add(x, ad::matmul(att, lv(layer.wo)));
    ad::Var ff = ad::layernorm_rows(x, lv(layer.ln2_g), lv(layer.ln2_b));
    ff = ad::gelu(ad::add_rowvec(ad::matmul(ff, lv(layer.w1)), lv(layer.b1)));
    x = ad::add(x, ad::add_rowvec(ad::matmul(ff, lv(layer.w2)), lv(layer.b2)));
  }
  ad::Var h = ad::layernorm_rows(x, lv(params_.final_g), lv(params_.final_b));
  f.h = h;
  f.tte = affine(h, params_.tte);

  // Per-stage head inputs; stage g sees history plus true covariates of
  // earlier stages of the predicted event.
  std::vector<ad::Var> stage_input;
  bool nested = config_.mode == EventMode::NestedAttention;
  if (nested) {
    int64_t g_count = n_stages_;
    std::vector<ad::RowSpec> pools(static_cast<size_t>(g_count - 1),
                                   ad::RowSpec(static_cast<size_t>(n)));
    for (size_t b = 0; b < batch.B; ++b) {
      for (size_t s = 0; s + 1 < batch.S; ++s) {
        if (!batch.live(b, s) || !batch.live(b, s + 1)) continue;
        size_t pos = batch.at(b, s);
        for (size_t m = 0; m < batch.M; ++m) {
          size_t c = batch.cell(b, s + 1, m);
          int64_t idx = batch.obs_indices[c];
          if (idx == 0) continue;
          const Route& r = route_of(idx);
          double value = batch.obs_value_mask[c] ? batch.obs_values[c] : 1.0;
          if (r.kind == ValueKind::MultivariateRegression) {
            if (r.cat_stage >= 0 && r.cat_stage <= g_count - 2)
              pools[static_cast<size_t>(r.cat_stage)][pos].emplace_back(idx, 1.0);
            if (batch.obs_value_mask[c] && r.num_stage >= 0 && r.num_stage <= g_count - 2)
              pools[static_cast<size_t>(r.num_stage)][pos].emplace_back(idx, value);
          } else if (r.cat_stage >= 0 && r.cat_stage <= g_count - 2) {
            pools[static_cast<size_t>(r.cat_stage)][pos].emplace_back(idx, value);
          }
        }
      }
    }
    std::vector<ad::Var> tokens{h};
    for (const auto& pool : pools) tokens.push_back(ad::embed_rows(lv(params_.embed), pool, d));
    ad::Var t = ad::add_rows_cycle(ad::row_interleave(tokens), lv(params_.inner.stage_pos));
    ad::Var att = ad::causal_attention(ad::matmul(t, lv(params_.inner.wq)),
                                       ad::matmul(t, lv(params_.inner.wk)),
                                       ad::matmul(t, lv(params_.inner.wv)), n, g_count, 1);
    ad::Var proj = ad::matmul(att, lv(params_.inner.wo));
    stage_input.resize(static_cast<size_t>(g_count));
    for (int64_t g = 1; g < g_count; ++g) {
      std::vector<int64_t> rows(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) rows[static_cast<size_t>(i)] = i * g_count + g;
      stage_input[static_cast<size_t>(g)] = ad::add(h, ad::pick_rows(proj, std::move(rows)));
    }
  }
  auto input_at = [&](int stage) { return nested ? stage_input[static_cast<size_t>(stage)] : h; };

  for (const auto& r : routes_) {
    if (!r.modeled) continue;
    if (r.kind == ValueKind::Categorical) {
      f.cat[r.name] = affine(input_at(r.cat_stage), params_.cat_heads.at(r.name));
    } else {
      f.presence[r.name] = affine(input_at(r.cat_stage), params_.presence_heads.at(r.name));
      f.value[r.name] = affine(input_at(r.num_stage), params_.value_heads.at(r.name));
    }
  }

  if (!with_loss) return;

  // Transition t: live event s followed by live event s+1; targets come from
  // event s+1 and every component is weighted 1/n so sums are means.
  int64_t n_trans = 0;
  for (size_t b = 0; b < batch.B; ++b)
    for (size_t s = 0; s + 1 < batch.S; ++s)
      if (batch.live(b, s) && batch.live(b, s + 1)) ++n_trans;
  f.result.transitions = n_trans;
  double wt = n_trans > 0 ? 1.0 / static_cast<double>(n_trans) : 0.0;

  std::vector<double> tte_t(static_cast<size_t>(n), 1.0), tte_w(static_cast<size_t>(n), 0.0);
  struct Targets {
    std::vector<int64_t> cat_t;
    std::vector<double> cat_w;
    Eigen::MatrixXd pres_t, pres_w, val_t, val_w;
  };
  std::map<std::string, Targets> targets;
  for (const auto& r : routes_) {
    if (!r.modeled) continue;
    Targets& t = targets[r.name];
    if (r.kind == ValueKind::Categorical) {
      t.cat_t.assign(static_cast<size_t>(n), -1);
      t.cat_w.assign(static_cast<size_t>(n), 0.0);
    } else {
      t.pres_t = Eigen::MatrixXd::Zero(n, r.size);
      t.pres_w = Eigen::MatrixXd::Zero(n, r.size);
      t.val_t = Eigen::MatrixXd::Zero(n, r.size);
      t.val_w = Eigen::MatrixXd::Zero(n, r.size);
    }
  }

  for (size_t b = 0; b < batch.B; ++b) {
    for (size_t s = 0; s + 1 < batch.S; ++s) {
      if (!batch.live(b, s) || !batch.live(b, s + 1)) continue;
      auto pos = static_cast<Eigen::Index>(batch.at(b, s));
      tte_t[static_cast<size_t>(pos)] =
          std::max(batch.time_deltas[batch.at(b, s + 1)], kMinTteDelta);
      tte_w[static_cast<size_t>(pos)] = wt;
      for (const auto& r : routes_) {
        if (!r.modeled) continue;
        Targets& t = targets[r.name];
        if (r.kind == ValueKind::Categorical) {
          t.cat_t[static_cast<size_t>(pos)] = r.size;  // absent unless observed below
          t.cat_w[static_cast<size_t>(pos)] = wt;
        } else {
          t.pres_w.row(pos).setConstant(wt);
        }
      }
      for (size_t m = 0; m < batch.M; ++m) {
        size_t c = batch.cell(b, s + 1, m);
        int64_t idx = batch.obs_indices[c];
        if (idx == 0) continue;
        const Route& r = route_of(idx);
        if (!r.modeled) continue;
        Targets& t = targets[r.name];
        int64_t within = idx - r.offset;
        if (r.kind == ValueKind::Categorical) {
          if (t.cat_t[static_cast<size_t>(pos)] == r.size)
            t.cat_t[static_cast<size_t>(pos)] = within;  // first observation wins
        } else {
          t.pres_t(pos, within) = 1.0;
          if (batch.obs_value_mask[c] && t.val_w(pos, within) == 0.0) {
            t.val_t(pos, within) = batch.obs_values[c];
            t.val_w(pos, within) = wt;
          }
        }
      }
    }
  }

  auto account = [&](const std::string& head, ad::Var term) {
    double v = term.val()(0, 0);
    if (!std::isfinite(v)) fail(ErrKind::NonFinite, "nll component '" + head + "' is " +
                                                        std::to_string(v));
    f.result.by_head[head] = v;
    f.total = f.total.tape == nullptr ? term : ad::add(f.total, term);
  };
  account("tte", ad::lognormal_mixture_nll_rows(f.tte, tte_t, tte_w));
  for (const auto& r : routes_) {
    if (!r.modeled) continue;
    const Targets& t = targets[r.name];
    if (r.kind == ValueKind::Categorical) {
      account(r.name, ad::ce_rows(f.cat.at(r.name), t.cat_t, t.cat_w));
    } else {
      account(r.name + ":presence", ad::bce_cells(f.presence.at(r.name), t.pres_t, t.pres_w));
      account(r.name + ":value", ad::gaussian_nll_cells(f.value.at(r.name), t.val_t, t.val_w));
    }
  }
  f.result.total = f.total.val()(0, 0);
}

Emissions Model::forward(const SparseBatch& batch) const {
  Forward f;
  build_forward(batch, f, false);
  Emissions e;
  e.B = batch.B;
  e.S = batch.S;
  e.tte = f.tte.val();
  for (const auto& [name, v] : f.cat) e.categorical[name] = v.val();
  for (const auto& [name, v] : f.presence) {
    const Eigen::MatrixXd& p = v.val();
    const Eigen::MatrixXd& val = f.value.at(name).val();
    Eigen::MatrixXd m(p.rows(), p.cols() + val.cols());
    m << p, val;
    e.numeric[name] = std::move(m);
  }
  return e;
}

NllResult Model::nll(const SparseBatch& batch) const {
  Forward f;
  build_forward(batch, f, true);
  return f.result;
}

NllResult Model::train_step(const SparseBatch& batch, double lr) {
  Forward f;
  build_forward(batch, f, true);
  if (f.result.transitions == 0) return f.result;  // nothing to fit
  f.tape.backward(f.total);

  auto params = param_list();
  if (adam_m_.empty()) {
    for (auto* p : params) {
      adam_m_.emplace_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
      adam_v_.emplace_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
    }
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double t = static_cast<double>(step_ + 1);
  for (size_t i = 0; i < params.size(); ++i) {
    const Eigen::MatrixXd& g = f.leaves[i].grad();
    if (!g.allFinite())
      fail(ErrKind::NonFiniteGradient, "gradient of tensor " + param_names()[i]);
    adam_m_[i] = b1 * adam_m_[i] + (1 - b1) * g;
    adam_v_[i] = b2 * adam_v_[i] + (1 - b2) * g.cwiseProduct(g);
    Eigen::MatrixXd mhat = adam_m_[i] / (1 - std::pow(b1, t));
    Eigen::MatrixXd vhat = adam_v_[i] / (1 - std::pow(b2, t));
    *params[i] -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
  }
  ++step_;
  return f.result;
}

std::vector<Eigen::MatrixXd> Model::gradients(const SparseBatch& batch) const {
  Forward f;
  build_forward(batch, f, true);
  if (f.result.transitions == 0) return {};
  f.tape.backward(f.total);
  std::vector<Eigen::MatrixXd> out;
  out.reserve(f.leaves.size());
  for (const auto& leaf : f.leaves) out.push_back(leaf.grad());
  return out;
}

Eigen::MatrixXd Model::hidden(const SparseBatch& batch) const {
  Forward f;
  build_forward(batch, f, false);
  return f.h.val();
}

void Model::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrKind::Io, "cannot write checkpoint " + path);
  out.write(kMagic, sizeof kMagic);

  json tensors = json::array();
  visit_params(params_, [&](const std::string& name, const Eigen::MatrixXd& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  json header = {{"schema_version", 1},
                 {"model_config", serialize_model_config(config_)},
                 {"manifest_hash", hex64(mhash_)},
                 {"step", step_},
                 {"tensors", std::move(tensors)}};
  std::string text = header.dump();
  uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  visit_params(params_, [&](const std::string&, const Eigen::MatrixXd& m) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(m.size())));
  });
  if (!out) fail(ErrKind::Io, "short write to checkpoint " + path);
}

Model Model::load(const std::string& path, const std::vector<MeasurementConfig>& measurements,
                  const FeatureManifest& manifest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrKind::Io, "cannot read checkpoint " + path);
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    fail(ErrKind::Format, "not a checkpoint file: " + path);
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) fail(ErrKind::Format, "truncated checkpoint header in " + path);

  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrKind::Format, std::string("bad checkpoint header: ") + e.what());
  }
  if (header.value("schema_version", 0) != 1)
    fail(ErrKind::Format, "unsupported checkpoint schema_version");
  std::string stored_hash = header.at("manifest_hash").get<std::string>();
  if (stored_hash != hex64(manifest_hash(manifest)))
    fail(ErrKind::MissingFitArtifact, "checkpoint was trained against manifest " + stored_hash +
                                          ", not " + hex64(manifest_hash(manifest)));

  ModelConfig config = parse_model_config(header.at("model_config").get<std::string>());
  Model model(config, measurements, manifest, 0);
  model.step_ = header.value("step", 0);

  auto params = model.param_list();
  auto names = model.param_names();
  const json& tensors = header.at("tensors");
  if (tensors.size() != params.size())
    fail(ErrKind::Format, "checkpoint holds " + std::to_string(tensors.size()) + " tensors, model " +
                              std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const json& t = tensors[i];
    if (t.at("name").get<std::string>() != names[i] ||
        t.at("rows").get<int64_t>() != params[i]->rows() ||
        t.at("cols").get<int64_t>() != params[i]->cols())
      fail(ErrKind::Format, "checkpoint tensor " + std::to_string(i) + " mismatches " + names[i]);
    in.read(reinterpret_cast<char*>(params[i]->data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(params[i]->size())));
  }
  if (!in) fail(ErrKind::Format, "truncated checkpoint blob in " + path);
  return model;
}

}  // namespace evseq
