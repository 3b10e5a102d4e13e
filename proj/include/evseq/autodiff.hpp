#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "evseq/common.hpp"

// Reverse-mode differentiation over dense matrices. A Tape records one forward
// pass; backward() walks it once. Tapes are single-use and never shared across
// threads.
namespace evseq::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int idx = -1;

  const Eigen::MatrixXd& val() const;
  const Eigen::MatrixXd& grad() const;
};

class Tape {
 public:
  // Called with the node's output gradient; adds into parent grads.
  using Back = std::function<void(const Eigen::MatrixXd&, Tape&)>;

  Var push(Eigen::MatrixXd value, Back back);
  const Eigen::MatrixXd& val(int i) const { return nodes_[i].value; }
  Eigen::MatrixXd& grad(int i) { return nodes_[i].grad; }

  // root must be 1x1; seeds it with 1 and accumulates leaf grads.
  void backward(Var root);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    Back back;
  };
  std::vector<Node> nodes_;
};

// Leaves: parameters and constants are the same node kind; constants simply
// never have their grad read back.
Var leaf(Tape& t, Eigen::MatrixXd v);

Var matmul(Var a, Var b);
Var add(Var a, Var b);            // identical shapes
Var add_rowvec(Var a, Var row);   // row is 1xC, broadcast down
Var scale(Var a, double c);
Var cwise_mul(Var a, Var b);
Var gelu(Var a);                  // exact erf form
Var layernorm_rows(Var a, Var gamma, Var beta);  // gamma/beta 1xC, eps 1e-5

// Multi-head scaled-dot attention over `groups` independent blocks of `len`
// consecutive rows; query i attends keys 0..i of its own block.
Var causal_attention(Var q, Var k, Var v, int64_t groups, int64_t len, int64_t heads);

Var pick_rows(Var a, std::vector<int64_t> rows);
// parts[g] supplies row n*G+g of the output; all parts share a shape.
Var row_interleave(const std::vector<Var>& parts);
// p is GxC; out.row(n) = a.row(n) + p.row(n % G).
Var add_rows_cycle(Var a, Var p);

// out.row(n) = sum over (index, weight) of weight * table.row(index).
using RowSpec = std::vector<std::vector<std::pair<int64_t, double>>>;
Var embed_rows(Var table, const RowSpec& rows, int64_t cols);

Var sum(Var a);  // 1x1 total of all cells

// Weighted loss sums, 1x1. Cells with weight 0 (or target -1 for ce) are
// skipped entirely, so their emission values may be arbitrary.
Var ce_rows(Var logits, const std::vector<int64_t>& targets, const std::vector<double>& weights);
// logits, targets and weights all NxC; one Bernoulli term per cell.
Var bce_cells(Var logits, const Eigen::MatrixXd& targets, const Eigen::MatrixXd& weights);
// params is Nx2C (C means, then C log-scales); x and weights NxC.
Var gaussian_nll_cells(Var params, const Eigen::MatrixXd& x, const Eigen::MatrixXd& weights);
// params is Nx3K (component logits, means, log-scales); targets must be > 0.
Var lognormal_mixture_nll_rows(Var params, const std::vector<double>& targets,
                               const std::vector<double>& weights);

double lognormal_mixture_logpdf(const Eigen::RowVectorXd& params, double x);

}  // namespace evseq::ad
