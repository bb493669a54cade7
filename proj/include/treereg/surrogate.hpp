#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "treereg/param_vector.hpp"
#include "treereg/rng.hpp"
#include "treereg/tape.hpp"

namespace treereg {

// One (flattened weights, true path-length cost) training pair for the
// estimator, tagged with the epoch it was collected at.
struct SurrogateSample {
  std::vector<double> w_flat;
  double omega_true = 0.0;
  int epoch_tag = 0;
};

struct SurrogateConfig {
  int hidden_units = 25;
  double epsilon = 1e-4;     // ridge strength on xi
  int window = 50;           // keep samples tagged within this many epochs
  int retrain_every = 25;
  int target_samples = 50;   // J: dataset size each fit is topped up to
  int augment_count = 10;    // perturbation draws added at every fit
  int restarts = 5;          // unregularized warm-up runs seeding the buffer
  int restart_epochs = 10;   // length of each warm-up run
  double learning_rate = 0.01;
  int epochs = 1000;
  double perturb_scale = 1.0;
  double fresh_fraction = 0.2;

  void validate() const;  // positivity checks; warns when window < retrain_every
};

// True path-length cost of a flattened parameter vector.
using OmegaFn = std::function<double(std::span<const double>)>;

SurrogateSample collect_sample(const ParamVector& w, const OmegaFn& omega_fn, int epoch);

// Draws around `base`: per-block Gaussian noise with standard deviation
// scale * (0.5 * std(block) + 0.01); the last round(count * fresh_fraction)
// draws are instead sampled fresh from uniform(-0.5, 0.5). Each draw is
// labeled by omega_fn.
std::vector<SurrogateSample> augment(const ParamVector& base, int count, Rng& rng,
                                     const OmegaFn& omega_fn, double scale = 1.0,
                                     double fresh_fraction = 0.2, int epoch_tag = 0);

// One checkpoint per short unregularized run, each run seeded differently.
std::vector<SurrogateSample> restart_samples(
    int restarts, const std::function<std::vector<double>(std::uint64_t)>& unregularized_train,
    const OmegaFn& omega_fn, std::uint64_t seed_base);

// Estimator parameters: one tanh hidden layer and a softplus output head.
ParamVector make_surrogate_params(int input_dim, int hidden_units);

struct SurrogateFitReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int sample_count = 0;
  bool reverted_to_init = false;       // final loss would have exceeded initial
  std::vector<double> loss_quartiles;  // loss at 0%, 25%, 50%, 75%, 100% of steps
};

// Minimizes sum_j (omega_j - estimate(w_j))^2 + epsilon * ||xi||^2 with
// full-batch Adam; deterministic given samples and seed. The returned xi never
// scores worse than its initialization on the training samples.
ParamVector fit_surrogate(std::span<const SurrogateSample> samples, const SurrogateConfig& config,
                          std::uint64_t seed, SurrogateFitReport* report = nullptr);

// Records the estimator with xi frozen as constants; returns a scalar node
// through which gradients flow to w.
ad::NodeId surrogate_penalty(ad::Tape& tape, ad::NodeId w, const ParamVector& xi);

double surrogate_estimate(const ParamVector& xi, std::span<const double> w);

// Sample buffer persistence: epoch_tag, omega_true, then the flat weights.
void save_samples_csv(std::span<const SurrogateSample> samples, const std::string& path);
std::vector<SurrogateSample> load_samples_csv(const std::string& path);

// Bookkeeping for regularized training: the sample buffer, the window filter,
// the retrain schedule, and the currently fitted estimator.
class SurrogateContext {
 public:
  SurrogateContext(SurrogateConfig config, OmegaFn omega_fn, std::uint64_t seed);

  // Labels the current weights and appends the sample; returns the true cost.
  double record_epoch(const ParamVector& w, int epoch);
  // Runs the configured number of warm-up restarts and buffers their
  // checkpoints (tag 0).
  void add_restarts(const std::function<std::vector<double>(std::uint64_t)>& unregularized_train);

  bool due(int epoch) const { return epoch % config_.retrain_every == 0; }
  bool ready() const { return fit_count_ > 0; }

  // Fits on the windowed buffer plus fresh augmentation around `current`,
  // topped up to target_samples.
  const SurrogateFitReport& fit(const ParamVector& current, int epoch);

  double estimate(std::span<const double> w) const;
  const ParamVector& xi() const;

  int fit_count() const { return fit_count_; }
  std::span<const SurrogateSample> buffer() const { return samples_; }
  std::vector<SurrogateSample> windowed(int epoch) const;
  int last_fit_dataset_size() const { return report_.sample_count; }
  const SurrogateConfig& config() const { return config_; }

 private:
  SurrogateConfig config_;
  OmegaFn omega_;
  Rng rng_;
  std::vector<SurrogateSample> samples_;
  ParamVector xi_;
  SurrogateFitReport report_;
  int fit_count_ = 0;
};

}  // namespace treereg
