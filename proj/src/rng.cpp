#include "treereg/rng.hpp"

#include <cmath>

#include "treereg/common.hpp"

namespace treereg {

double Rng::gaussian() {
  // u1 in (0,1] so log(u1) is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int Rng::uniform_int(int n) {
  if (n <= 0) throw ContractError("uniform_int: n must be positive");
  return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

int Rng::categorical(std::span<const double> probs) {
  if (probs.empty()) throw ContractError("categorical: empty probability vector");
  double total = 0.0;
  for (double p : probs) {
    if (p < 0.0) throw ContractError("categorical: negative probability");
    total += p;
  }
  if (total <= 0.0) throw ContractError("categorical: probabilities sum to zero");
  double u = uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;  // rounding fallthrough
}

}  // namespace treereg
