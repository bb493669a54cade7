#include "treereg/adam.hpp"

#include <cmath>

#include "treereg/common.hpp"
#include "treereg/param_vector.hpp"

namespace treereg {

void adam_step(ParamVector& w, std::span<const double> grad, AdamState& state) {
  std::size_t n = w.values.size();
  if (grad.size() != n || state.m.size() != n || state.v.size() != n)
    throw ContractError("adam_step: dimension mismatch");
  for (double g : grad)
    if (!std::isfinite(g)) throw NumericError("adam_step: gradient corrupt (non-finite)");

  state.step += 1;
  double b1 = state.beta1, b2 = state.beta2;
  double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < n; ++i) {
    double g = grad[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    double mhat = state.m[i] / c1;
    double vhat = state.v[i] / c2;
    w.values[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

}  // namespace treereg
