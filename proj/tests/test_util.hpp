#pragma once

// Shared oracles for the test suite: central finite differences against the
// tape, and a scale-aware gradient comparison.

#include <cmath>
#include <functional>
#include <vector>

#include "treereg/param_vector.hpp"
#include "treereg/tape.hpp"

namespace testutil {

// Central finite differences of a recorded scalar function of w.
template <typename BuildFn>
std::vector<double> fd_gradient(const treereg::ParamVector& w, BuildFn build, double h = 1e-5) {
  treereg::ParamVector probe = w;
  std::vector<double> grad(w.values.size(), 0.0);
  for (std::size_t i = 0; i < w.values.size(); ++i) {
    double keep = probe.values[i];
    probe.values[i] = keep + h;
    double fp = treereg::ad::forward_record(probe, build).output_value();
    probe.values[i] = keep - h;
    double fm = treereg::ad::forward_record(probe, build).output_value();
    probe.values[i] = keep;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// max_i |a_i - b_i| scaled by the largest reference component.
inline double gradient_rel_err(const std::vector<double>& got, const std::vector<double>& ref) {
  double scale = 0.0;
  for (double r : ref) scale = std::max(scale, std::abs(r));
  double worst = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(got[i] - ref[i]));
  return worst / (scale + 1e-12);
}

}  // namespace testutil
