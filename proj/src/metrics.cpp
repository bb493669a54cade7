#include "treereg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "treereg/common.hpp"

namespace treereg {

std::vector<double> midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

double auc_score(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size())
    throw ContractError("auc: " + std::to_string(scores.size()) + " scores vs " +
                        std::to_string(labels.size()) + " labels");
  std::size_t n_pos = 0;
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) throw ContractError("auc: labels must be 0 or 1");
    if (y == 1.0) ++n_pos;
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ContractError("auc: needs both classes, got " + std::to_string(n_pos) + " positives of " +
                        std::to_string(labels.size()));
  const std::vector<double> ranks = midranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 1.0) rank_sum += ranks[i];
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw ContractError("pearson: needs two equal-length series of at least 2 points");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va <= 0.0 || vb <= 0.0) throw ContractError("pearson: a series has zero variance");
  return cov / std::sqrt(va * vb);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  const std::vector<double> ra = midranks(a);
  const std::vector<double> rb = midranks(b);
  return pearson(ra, rb);
}

}  // namespace treereg
