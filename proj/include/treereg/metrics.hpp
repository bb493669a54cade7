#pragma once

#include <span>
#include <vector>

namespace treereg {

// Average rank of each entry, 1-based, ties sharing their midrank.
std::vector<double> midranks(std::span<const double> values);

// Probability that a random positive outscores a random negative, ties counted
// half (the rank-sum estimator). Labels must be 0/1 with both classes present.
double auc_score(std::span<const double> scores, std::span<const double> labels);

// Throws ContractError when either side has (numerically) zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

// Pearson correlation of midranks; insensitive to monotone transforms.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace treereg
