#pragma once

#include <cstdint>
#include <vector>

namespace evseq {

// Mann-Whitney AUROC with midranks for ties. Labels are 0/1; requires both
// classes present. Deterministic for any input order.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

double accuracy_at(const std::vector<double>& scores, const std::vector<int>& labels,
                   double threshold);

}  // namespace evseq
