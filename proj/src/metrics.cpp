#include "evseq/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "evseq/common.hpp"

namespace evseq {

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) fail(ErrKind::ShapeMismatch, "auroc: size mismatch");
  size_t n = scores.size();
  size_t pos = 0;
  for (int l : labels) pos += static_cast<size_t>(l != 0);
  size_t neg = n - pos;
  if (pos == 0 || neg == 0) fail(ErrKind::DegenerateLabels, "auroc needs both classes");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // midranks over tie groups; rank sum of positives gives the U statistic
  double rank_sum_pos = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) rank_sum_pos += midrank;
    i = j;
  }
  double u = rank_sum_pos - static_cast<double>(pos) * (static_cast<double>(pos) + 1) / 2;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double accuracy_at(const std::vector<double>& scores, const std::vector<int>& labels,
                   double threshold) {
  if (scores.size() != labels.size()) fail(ErrKind::ShapeMismatch, "accuracy: size mismatch");
  if (scores.empty()) fail(ErrKind::DegenerateLabels, "accuracy over empty set");
  size_t hit = 0;
  for (size_t i = 0; i < scores.size(); ++i)
    hit += static_cast<size_t>((scores[i] >= threshold ? 1 : 0) == (labels[i] != 0 ? 1 : 0));
  return static_cast<double>(hit) / static_cast<double>(scores.size());
}

}  // namespace evseq
