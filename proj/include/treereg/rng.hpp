#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace treereg {

// Seeded generator passed explicitly everywhere randomness is needed.
// Distributions are implemented in-house (not std:: distributions) so that a
// fixed seed reproduces the same stream on any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, cacheless.
  double gaussian();
  double gaussian(double mean, double sd) { return mean + sd * gaussian(); }

  // [0, n)
  int uniform_int(int n);

  bool bernoulli(double p) { return uniform() < p; }

  // Index sampled proportionally to probs (need not be exactly normalized).
  int categorical(std::span<const double> probs);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (int i = static_cast<int>(items.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(items[i], items[static_cast<std::size_t>(j)]);
    }
  }

  // Independent stream for a sub-task; same (seed, salt) -> same stream.
  Rng derive(std::uint64_t salt) const { return Rng(seed_ ^ salt); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

}  // namespace treereg
