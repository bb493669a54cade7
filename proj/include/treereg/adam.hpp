#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace treereg {

class ParamVector;

// Adam with bias correction. One state per optimized vector.
struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<double> m;  // first moment
  std::vector<double> v;  // second moment

  explicit AdamState(std::int64_t dim, double lr = 1e-3)
      : learning_rate(lr), m(static_cast<std::size_t>(dim), 0.0),
        v(static_cast<std::size_t>(dim), 0.0) {}
};

// In-place update of w from grad. Throws NumericError on non-finite gradient
// ("gradient corrupt") and ContractError on dimension mismatch.
void adam_step(ParamVector& w, std::span<const double> grad, AdamState& state);

}  // namespace treereg
