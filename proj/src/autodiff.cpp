#include "evseq/autodiff.hpp"

#include <cmath>
#include <memory>

namespace evseq::ad {

namespace {

constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5*log(2*pi)

void check_same_shape(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(ErrKind::ShapeMismatch, std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                     "x" + std::to_string(b.cols()));
}

// Softmax over the first `n` entries of a matrix row, rest zeroed.
void prefix_softmax(Eigen::MatrixXd& m, Eigen::Index i, Eigen::Index n) {
  double mx = m.row(i).head(n).maxCoeff();
  m.row(i).head(n) = (m.row(i).head(n).array() - mx).exp();
  m.row(i).head(n) /= m.row(i).head(n).sum();
  if (n < m.cols()) m.row(i).tail(m.cols() - n).setZero();
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) { return z > 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

const Eigen::MatrixXd& Var::val() const { return tape->val(idx); }
const Eigen::MatrixXd& Var::grad() const { return tape->grad(idx); }

Var Tape::push(Eigen::MatrixXd value, Back back) {
  nodes_.push_back(Node{std::move(value), {}, std::move(back)});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root) {
  if (root.tape != this || root.idx < 0) fail(ErrKind::ShapeMismatch, "backward: foreign root");
  if (val(root.idx).size() != 1) fail(ErrKind::ShapeMismatch, "backward: root must be scalar");
  for (int i = 0; i <= root.idx; ++i)
    nodes_[i].grad = Eigen::MatrixXd::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
  nodes_[root.idx].grad(0, 0) = 1.0;
  for (int i = root.idx; i >= 0; --i)
    if (nodes_[i].back) nodes_[i].back(nodes_[i].grad, *this);
}

Var leaf(Tape& t, Eigen::MatrixXd v) { return t.push(std::move(v), nullptr); }

Var matmul(Var a, Var b) {
  const auto& A = a.val();
  const auto& B = b.val();
  if (A.cols() != B.rows()) fail(ErrKind::ShapeMismatch, "matmul: inner dims differ");
  int ia = a.idx, ib = b.idx;
  return a.tape->push(A * B, [ia, ib](const Eigen::MatrixXd& g, Tape& t) {
    t.grad(ia).noalias() += g * t.val(ib).transpose();
    t.grad(ib).noalias() += t.val(ia).transpose() * g;
  });
}

Var add(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "add");
  int ia = a.idx, ib = b.idx;
  return a.tape->push(a.val() + b.val(), [ia, ib](const Eigen::MatrixXd& g, Tape& t) {
    t.grad(ia) += g;
    t.grad(ib) += g;
  });
}

Var add_rowvec(Var a, Var row) {
  const auto& A = a.val();
  const auto& R = row.val();
  if (R.rows() != 1 || R.cols() != A.cols()) fail(ErrKind::ShapeMismatch, "add_rowvec");
  int ia = a.idx, ir = row.idx;
  return a.tape->push(A.rowwise() + R.row(0), [ia, ir](const Eigen::MatrixXd& g, Tape& t) {
    t.grad(ia) += g;
    t.grad(ir).row(0) += g.colwise().sum();
  });
}

Var scale(Var a, double c) {
  int ia = a.idx;
  return a.tape->push(a.val() * c,
                      [ia, c](const Eigen::MatrixXd& g, Tape& t) { t.grad(ia) += g * c; });
}

Var cwise_mul(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "cwise_mul");
  int ia = a.idx, ib = b.idx;
  return a.tape->push(a.val().cwiseProduct(b.val()), [ia, ib](const Eigen::MatrixXd& g, Tape& t) {
    t.grad(ia) += g.cwiseProduct(t.val(ib));
    t.grad(ib) += g.cwiseProduct(t.val(ia));
  });
}

Var gelu(Var a) {
  auto cdf = [](double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); };
  const auto& X = a.val();
  Eigen::MatrixXd out = X.cwiseProduct(X.unaryExpr(cdf));
  int ia = a.idx;
  return a.tape->push(std::move(out), [ia, cdf](const Eigen::MatrixXd& g, Tape& t) {
    const auto& x = t.val(ia).array();
    Eigen::ArrayXXd pdf = (-0.5 * x.square()).exp() / std::sqrt(2.0 * M_PI);
    t.grad(ia).array() += g.array() * (t.val(ia).unaryExpr(cdf).array() + x * pdf);
  });
}

Var layernorm_rows(Var a, Var gamma, Var beta) {
  const auto& X = a.val();
  const auto& G = gamma.val();
  const auto& B = beta.val();
  if (G.rows() != 1 || G.cols() != X.cols() || B.rows() != 1 || B.cols() != X.cols())
    fail(ErrKind::ShapeMismatch, "layernorm_rows: gamma/beta must be 1xC");
  const double eps = 1e-5;
  auto xhat = std::make_shared<Eigen::MatrixXd>(X.rows(), X.cols());
  auto inv_s = std::make_shared<Eigen::VectorXd>(X.rows());
  Eigen::MatrixXd out(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    double mu = X.row(i).mean();
    double var = (X.row(i).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = (X.row(i).array() - mu) * is;
    (*inv_s)(i) = is;
    out.row(i) = xhat->row(i).cwiseProduct(G.row(0)) + B.row(0);
  }
  int ia = a.idx, ig = gamma.idx, ib = beta.idx;
  return a.tape->push(std::move(out), [ia, ig, ib, xhat, inv_s](const Eigen::MatrixXd& g, Tape& t) {
    const auto& gam = t.val(ig).row(0);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      Eigen::RowVectorXd h = g.row(i).cwiseProduct(gam);
      double mh = h.mean();
      double mhx = h.cwiseProduct(xhat->row(i)).mean();
      t.grad(ia).row(i) +=
          ((h.array() - mh) - xhat->row(i).array() * mhx).matrix() * (*inv_s)(i);
      t.grad(ig).row(0) += g.row(i).cwiseProduct(xhat->row(i));
      t.grad(ib).row(0) += g.row(i);
    }
  });
}

Var causal_attention(Var q, Var k, Var v, int64_t groups, int64_t len, int64_t heads) {
  const auto& Q = q.val();
  check_same_shape(Q, k.val(), "causal_attention q/k");
  check_same_shape(Q, v.val(), "causal_attention q/v");
  if (Q.rows() != groups * len) fail(ErrKind::ShapeMismatch, "causal_attention: rows != groups*len");
  if (heads < 1 || Q.cols() % heads != 0)
    fail(ErrKind::ShapeMismatch, "causal_attention: cols not divisible by heads");
  Eigen::Index dh = Q.cols() / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Eigen::MatrixXd>>();
  probs->reserve(static_cast<size_t>(groups * heads));
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(Q.rows(), Q.cols());
  for (int64_t g = 0; g < groups; ++g) {
    for (int64_t h = 0; h < heads; ++h) {
      auto Qh = Q.block(g * len, h * dh, len, dh);
      auto Kh = k.val().block(g * len, h * dh, len, dh);
      auto Vh = v.val().block(g * len, h * dh, len, dh);
      Eigen::MatrixXd P = Qh * Kh.transpose() * inv_sqrt;
      for (Eigen::Index i = 0; i < len; ++i) prefix_softmax(P, i, i + 1);
      out.block(g * len, h * dh, len, dh).noalias() = P * Vh;
      probs->push_back(std::move(P));
    }
  }
  int iq = q.idx, ik = k.idx, iv = v.idx;
  return q.tape->push(
      std::move(out),
      [iq, ik, iv, groups, len, heads, dh, inv_sqrt, probs](const Eigen::MatrixXd& g, Tape& t) {
        for (int64_t b = 0; b < groups; ++b) {
          for (int64_t h = 0; h < heads; ++h) {
            const Eigen::MatrixXd& P = (*probs)[static_cast<size_t>(b * heads + h)];
            auto Gh = g.block(b * len, h * dh, len, dh);
            auto Qh = t.val(iq).block(b * len, h * dh, len, dh);
            auto Kh = t.val(ik).block(b * len, h * dh, len, dh);
            auto Vh = t.val(iv).block(b * len, h * dh, len, dh);
            Eigen::MatrixXd dP = Gh * Vh.transpose();
            Eigen::VectorXd rowdot = dP.cwiseProduct(P).rowwise().sum();
            Eigen::MatrixXd dS = P.cwiseProduct(dP.colwise() - rowdot) * inv_sqrt;
            t.grad(iq).block(b * len, h * dh, len, dh).noalias() += dS * Kh;
            t.grad(ik).block(b * len, h * dh, len, dh).noalias() += dS.transpose() * Qh;
            t.grad(iv).block(b * len, h * dh, len, dh).noalias() += P.transpose() * Gh;
          }
        }
      });
}

Var pick_rows(Var a, std::vector<int64_t> rows) {
  const auto& A = a.val();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), A.cols());
  for (size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= A.rows()) fail(ErrKind::IndexOutOfRange, "pick_rows");
    out.row(static_cast<Eigen::Index>(r)) = A.row(rows[r]);
  }
  int ia = a.idx;
  auto picked = std::make_shared<std::vector<int64_t>>(std::move(rows));
  return a.tape->push(std::move(out), [ia, picked](const Eigen::MatrixXd& g, Tape& t) {
    for (size_t r = 0; r < picked->size(); ++r)
      t.grad(ia).row((*picked)[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

Var row_interleave(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrKind::ShapeMismatch, "row_interleave: no parts");
  const auto& first = parts[0].val();
  auto G = static_cast<Eigen::Index>(parts.size());
  Eigen::MatrixXd out(first.rows() * G, first.cols());
  std::vector<int> idxs;
  for (const auto& p : parts) {
    check_same_shape(first, p.val(), "row_interleave");
    idxs.push_back(p.idx);
  }
  for (Eigen::Index g = 0; g < G; ++g)
    for (Eigen::Index n = 0; n < first.rows(); ++n)
      out.row(n * G + g) = parts[static_cast<size_t>(g)].val().row(n);
  auto shared = std::make_shared<std::vector<int>>(std::move(idxs));
  return parts[0].tape->push(std::move(out), [shared, G](const Eigen::MatrixXd& g, Tape& t) {
    Eigen::Index n_rows = g.rows() / G;
    for (Eigen::Index p = 0; p < G; ++p) {
      auto& dst = t.grad((*shared)[static_cast<size_t>(p)]);
      for (Eigen::Index n = 0; n < n_rows; ++n) dst.row(n) += g.row(n * G + p);
    }
  });
}

Var add_rows_cycle(Var a, Var p) {
  const auto& A = a.val();
  const auto& P = p.val();
  if (P.cols() != A.cols() || P.rows() < 1 || A.rows() % P.rows() != 0)
    fail(ErrKind::ShapeMismatch, "add_rows_cycle");
  Eigen::Index G = P.rows();
  Eigen::MatrixXd out = A;
  for (Eigen::Index n = 0; n < A.rows(); ++n) out.row(n) += P.row(n % G);
  int ia = a.idx, ip = p.idx;
  return a.tape->push(std::move(out), [ia, ip, G](const Eigen::MatrixXd& g, Tape& t) {
    t.grad(ia) += g;
    for (Eigen::Index n = 0; n < g.rows(); ++n) t.grad(ip).row(n % G) += g.row(n);
  });
}

Var embed_rows(Var table, const RowSpec& rows, int64_t cols) {
  const auto& T = table.val();
  if (T.cols() != cols) fail(ErrKind::ShapeMismatch, "embed_rows: table cols");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), cols);
  for (size_t n = 0; n < rows.size(); ++n)
    for (auto [idx, w] : rows[n]) {
      if (idx < 0 || idx >= T.rows()) fail(ErrKind::IndexOutOfRange, "embed_rows");
      out.row(static_cast<Eigen::Index>(n)) += w * T.row(idx);
    }
  int it = table.idx;
  auto spec = std::make_shared<const RowSpec>(rows);
  return table.tape->push(std::move(out), [it, spec](const Eigen::MatrixXd& g, Tape& t) {
    for (size_t n = 0; n < spec->size(); ++n)
      for (auto [idx, w] : (*spec)[n])
        t.grad(it).row(idx) += w * g.row(static_cast<Eigen::Index>(n));
  });
}

Var sum(Var a) {
  int ia = a.idx;
  return a.tape->push(Eigen::MatrixXd::Constant(1, 1, a.val().sum()),
                      [ia](const Eigen::MatrixXd& g, Tape& t) {
                        t.grad(ia).array() += g(0, 0);
                      });
}

Var ce_rows(Var logits, const std::vector<int64_t>& targets, const std::vector<double>& weights) {
  const auto& Z = logits.val();
  if (static_cast<Eigen::Index>(targets.size()) != Z.rows() || targets.size() != weights.size())
    fail(ErrKind::ShapeMismatch, "ce_rows: target count");
  double loss = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || weights[i] == 0) continue;
    if (targets[i] >= Z.cols()) fail(ErrKind::IndexOutOfRange, "ce_rows: target class");
    auto row = Z.row(static_cast<Eigen::Index>(i));
    double m = row.maxCoeff();
    double lse = m + std::log((row.array() - m).exp().sum());
    loss += weights[i] * (lse - row(targets[i]));
  }
  int il = logits.idx;
  auto tg = std::make_shared<std::vector<int64_t>>(targets);
  auto w = std::make_shared<std::vector<double>>(weights);
  return logits.tape->push(Eigen::MatrixXd::Constant(1, 1, loss),
                           [il, tg, w](const Eigen::MatrixXd& g, Tape& t) {
                             const auto& Z = t.val(il);
                             for (size_t i = 0; i < tg->size(); ++i) {
                               if ((*tg)[i] < 0 || (*w)[i] == 0) continue;
                               auto row = Z.row(static_cast<Eigen::Index>(i));
                               double m = row.maxCoeff();
                               Eigen::RowVectorXd p = (row.array() - m).exp();
                               p /= p.sum();
                               p((*tg)[i]) -= 1.0;
                               t.grad(il).row(static_cast<Eigen::Index>(i)) +=
                                   g(0, 0) * (*w)[i] * p;
                             }
                           });
}

Var bce_cells(Var logits, const Eigen::MatrixXd& targets, const Eigen::MatrixXd& weights) {
  const auto& Z = logits.val();
  check_same_shape(Z, targets, "bce_cells targets");
  check_same_shape(Z, weights, "bce_cells weights");
  double loss = 0;
  for (Eigen::Index i = 0; i < Z.rows(); ++i)
    for (Eigen::Index c = 0; c < Z.cols(); ++c) {
      if (weights(i, c) == 0) continue;
      loss += weights(i, c) * (softplus(Z(i, c)) - targets(i, c) * Z(i, c));
    }
  int il = logits.idx;
  auto tg = std::make_shared<Eigen::MatrixXd>(targets);
  auto w = std::make_shared<Eigen::MatrixXd>(weights);
  return logits.tape->push(Eigen::MatrixXd::Constant(1, 1, loss),
                           [il, tg, w](const Eigen::MatrixXd& g, Tape& t) {
                             const auto& Z = t.val(il);
                             for (Eigen::Index i = 0; i < Z.rows(); ++i)
                               for (Eigen::Index c = 0; c < Z.cols(); ++c) {
                                 if ((*w)(i, c) == 0) continue;
                                 t.grad(il)(i, c) += g(0, 0) * (*w)(i, c) *
                                                     (sigmoid(Z(i, c)) - (*tg)(i, c));
                               }
                           });
}

Var gaussian_nll_cells(Var params, const Eigen::MatrixXd& x, const Eigen::MatrixXd& weights) {
  const auto& P = params.val();
  check_same_shape(x, weights, "gaussian_nll_cells weights");
  if (P.rows() != x.rows() || P.cols() != 2 * x.cols())
    fail(ErrKind::ShapeMismatch, "gaussian_nll_cells: params not Nx2C");
  Eigen::Index C = x.cols();
  double loss = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index c = 0; c < C; ++c) {
      if (weights(i, c) == 0) continue;
      double ls = P(i, C + c);
      double inv_var = std::exp(-2.0 * ls);
      double d = x(i, c) - P(i, c);
      loss += weights(i, c) * (ls + kHalfLog2Pi + 0.5 * inv_var * d * d);
    }
  int ip = params.idx;
  auto xv = std::make_shared<Eigen::MatrixXd>(x);
  auto w = std::make_shared<Eigen::MatrixXd>(weights);
  return params.tape->push(Eigen::MatrixXd::Constant(1, 1, loss),
                           [ip, xv, w, C](const Eigen::MatrixXd& g, Tape& t) {
                             const auto& P = t.val(ip);
                             for (Eigen::Index i = 0; i < xv->rows(); ++i)
                               for (Eigen::Index c = 0; c < C; ++c) {
                                 if ((*w)(i, c) == 0) continue;
                                 double inv_var = std::exp(-2.0 * P(i, C + c));
                                 double d = (*xv)(i, c) - P(i, c);
                                 double k = g(0, 0) * (*w)(i, c);
                                 t.grad(ip)(i, c) += k * -inv_var * d;
                                 t.grad(ip)(i, C + c) += k * (1.0 - inv_var * d * d);
                               }
                           });
}

namespace {

// Per-component log density of the log-normal mixture at x, plus the component
// log weights; shared by the loss forward/backward and the public logpdf.
void mixture_terms(const Eigen::RowVectorXd& params, double x, Eigen::RowVectorXd& a,
                   Eigen::RowVectorXd& log_w) {
  Eigen::Index K = params.size() / 3;
  auto wl = params.head(K);
  double m = wl.maxCoeff();
  double lse = m + std::log((wl.array() - m).exp().sum());
  log_w = wl.array() - lse;
  double z = std::log(x);
  a.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    double mu = params(K + k), ls = params(2 * K + k);
    double d = z - mu;
    a(k) = log_w(k) - z - ls - kHalfLog2Pi - 0.5 * std::exp(-2.0 * ls) * d * d;
  }
}

}  // namespace

double lognormal_mixture_logpdf(const Eigen::RowVectorXd& params, double x) {
  if (params.size() % 3 != 0 || params.size() == 0)
    fail(ErrKind::ShapeMismatch, "lognormal_mixture_logpdf: params not 3K");
  if (!(x > 0)) fail(ErrKind::NonFinite, "lognormal_mixture_logpdf: x must be positive");
  Eigen::RowVectorXd a, log_w;
  mixture_terms(params, x, a, log_w);
  double m = a.maxCoeff();
  return m + std::log((a.array() - m).exp().sum());
}

Var lognormal_mixture_nll_rows(Var params, const std::vector<double>& targets,
                               const std::vector<double>& weights) {
  const auto& P = params.val();
  if (P.cols() % 3 != 0 || P.cols() == 0 || static_cast<Eigen::Index>(targets.size()) != P.rows() ||
      targets.size() != weights.size())
    fail(ErrKind::ShapeMismatch, "lognormal_mixture_nll_rows");
  double loss = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (weights[i] == 0) continue;
    if (!(targets[i] > 0)) fail(ErrKind::NonFinite, "lognormal_mixture_nll_rows: delta <= 0");
    loss -= weights[i] * lognormal_mixture_logpdf(P.row(static_cast<Eigen::Index>(i)), targets[i]);
  }
  int ip = params.idx;
  auto tg = std::make_shared<std::vector<double>>(targets);
  auto w = std::make_shared<std::vector<double>>(weights);
  return params.tape->push(
      Eigen::MatrixXd::Constant(1, 1, loss), [ip, tg, w](const Eigen::MatrixXd& g, Tape& t) {
        const auto& P = t.val(ip);
        Eigen::Index K = P.cols() / 3;
        Eigen::RowVectorXd a, log_w;
        for (size_t i = 0; i < tg->size(); ++i) {
          if ((*w)[i] == 0) continue;
          auto n = static_cast<Eigen::Index>(i);
          mixture_terms(P.row(n), (*tg)[i], a, log_w);
          double m = a.maxCoeff();
          Eigen::RowVectorXd r = (a.array() - m).exp();
          r /= r.sum();
          double z = std::log((*tg)[i]);
          double c = g(0, 0) * (*w)[i];
          for (Eigen::Index k = 0; k < K; ++k) {
            double mu = P(n, K + k), ls = P(n, 2 * K + k);
            double d = z - mu;
            double inv_var = std::exp(-2.0 * ls);
            t.grad(ip)(n, k) += c * (std::exp(log_w(k)) - r(k));
            t.grad(ip)(n, K + k) += c * -r(k) * inv_var * d;
            t.grad(ip)(n, 2 * K + k) += c * r(k) * (1.0 - inv_var * d * d);
          }
        }
      });
}

}  // namespace evseq::ad
