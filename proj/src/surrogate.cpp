#include "treereg/surrogate.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "treereg/adam.hpp"
#include "treereg/common.hpp"
#include "treereg/io.hpp"
#include "treereg/matrix.hpp"

namespace treereg {

namespace {

constexpr std::uint64_t kStreamMix = 0x9e3779b97f4a7c15ULL;

void init_estimator(ParamVector& xi, Rng& rng) {
  for (const BlockSpec& spec : xi.blocks) {
    auto values = xi.block(spec.name);
    if (spec.name.ends_with(".b")) {
      std::fill(values.begin(), values.end(), 0.0);
    } else {
      // Glorot range: the input layer can be thousands of units wide, and a
      // fixed range would start the tanh layer deep in saturation.
      const double limit = std::sqrt(6.0 / (spec.shape[0] + spec.shape[1]));
      for (double& v : values) v = rng.uniform(-limit, limit);
    }
  }
}

// Builds estimate(rows) for an (n x input_dim) input node; xi enters as
// slices of `xi_node` (param when fitting, const when used as a penalty).
ad::NodeId estimator_forward(ad::Tape& tape, ad::NodeId inputs, ad::NodeId xi_node,
                             const ParamVector& xi_layout) {
  auto slice_of = [&](const char* name) {
    const BlockSpec& spec = xi_layout.block_spec(name);
    return tape.slice(xi_node, static_cast<int>(spec.offset), static_cast<int>(spec.size()));
  };
  const std::vector<int>& shape = xi_layout.block_spec("hidden.w").shape;
  const int hidden = shape[0], input_dim = shape[1];
  ad::NodeId h = tape.tanh(
      tape.linear(inputs, slice_of("hidden.w"), slice_of("hidden.b"), input_dim, hidden));
  return tape.softplus(tape.linear(h, slice_of("out.w"), slice_of("out.b"), hidden, 1));
}

}  // namespace

void SurrogateConfig::validate() const {
  if (hidden_units <= 0) throw ContractError("surrogate config: hidden_units must be positive");
  if (epsilon <= 0.0) throw ContractError("surrogate config: epsilon must be positive");
  if (window <= 0 || retrain_every <= 0)
    throw ContractError("surrogate config: window and retrain_every must be positive");
  if (target_samples < 2)
    throw ContractError("surrogate config: target_samples must be at least 2");
  if (augment_count < 0 || restarts < 0 || restart_epochs < 0)
    throw ContractError("surrogate config: counts must be non-negative");
  if (learning_rate <= 0.0) throw ContractError("surrogate config: learning_rate must be positive");
  if (epochs < 0) throw ContractError("surrogate config: epochs must be non-negative");
  if (perturb_scale < 0.0) throw ContractError("surrogate config: perturb_scale must be >= 0");
  if (fresh_fraction < 0.0 || fresh_fraction > 1.0)
    throw ContractError("surrogate config: fresh_fraction must be in [0, 1]");
  if (window < retrain_every)
    warn("surrogate config: window (" + std::to_string(window) + ") is shorter than retrain_every (" +
         std::to_string(retrain_every) + "); fits may see very few samples");
}

SurrogateSample collect_sample(const ParamVector& w, const OmegaFn& omega_fn, int epoch) {
  SurrogateSample s;
  s.w_flat = w.values;
  s.omega_true = omega_fn(w.values);
  s.epoch_tag = epoch;
  return s;
}

std::vector<SurrogateSample> augment(const ParamVector& base, int count, Rng& rng,
                                     const OmegaFn& omega_fn, double scale, double fresh_fraction,
                                     int epoch_tag) {
  if (count < 0) throw ContractError("augment: count must be non-negative");
  std::vector<SurrogateSample> out;
  if (count == 0) return out;
  const int n_fresh = static_cast<int>(std::lround(count * fresh_fraction));

  std::vector<double> sigma(base.blocks.size(), 0.0);
  for (std::size_t b = 0; b < base.blocks.size(); ++b) {
    const auto values = base.block(base.blocks[b].name);
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    sigma[b] = scale * (0.5 * std::sqrt(var) + 0.01);
  }

  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    SurrogateSample s;
    s.epoch_tag = epoch_tag;
    s.w_flat = base.values;
    if (i >= count - n_fresh) {
      for (double& v : s.w_flat) v = rng.uniform(-0.5, 0.5);
    } else {
      for (std::size_t b = 0; b < base.blocks.size(); ++b) {
        const BlockSpec& spec = base.blocks[b];
        for (std::int64_t j = spec.offset; j < spec.offset + spec.size(); ++j)
          s.w_flat[static_cast<std::size_t>(j)] += rng.gaussian(0.0, sigma[b]);
      }
    }
    s.omega_true = omega_fn(s.w_flat);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<SurrogateSample> restart_samples(
    int restarts, const std::function<std::vector<double>(std::uint64_t)>& unregularized_train,
    const OmegaFn& omega_fn, std::uint64_t seed_base) {
  if (restarts < 0) throw ContractError("restart_samples: restarts must be non-negative");
  std::vector<SurrogateSample> out;
  out.reserve(static_cast<std::size_t>(restarts));
  for (int r = 0; r < restarts; ++r) {
    SurrogateSample s;
    s.w_flat = unregularized_train(seed_base ^ (kStreamMix * static_cast<std::uint64_t>(r + 1)));
    s.omega_true = omega_fn(s.w_flat);
    s.epoch_tag = 0;
    out.push_back(std::move(s));
  }
  return out;
}

ParamVector make_surrogate_params(int input_dim, int hidden_units) {
  if (input_dim <= 0 || hidden_units <= 0)
    throw ContractError("surrogate params: dimensions must be positive");
  return ParamVector::create({{"hidden.w", {hidden_units, input_dim}},
                              {"hidden.b", {hidden_units}},
                              {"out.w", {1, hidden_units}},
                              {"out.b", {1}}});
}

ParamVector fit_surrogate(std::span<const SurrogateSample> samples, const SurrogateConfig& config,
                          std::uint64_t seed, SurrogateFitReport* report) {
  config.validate();
  if (samples.size() < 2)
    throw ContractError("insufficient surrogate data (" + std::to_string(samples.size()) +
                        " samples, need at least 2)");
  const int n = static_cast<int>(samples.size());
  const int dim = static_cast<int>(samples[0].w_flat.size());
  Matrix inputs(n, dim);
  std::vector<double> targets(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const SurrogateSample& s = samples[static_cast<std::size_t>(i)];
    if (static_cast<int>(s.w_flat.size()) != dim)
      throw ContractError("fit_surrogate: sample " + std::to_string(i) + " has " +
                          std::to_string(s.w_flat.size()) + " weights, expected " +
                          std::to_string(dim));
    if (!(s.omega_true >= 0.0))
      throw ContractError("fit_surrogate: sample " + std::to_string(i) +
                          " has negative or non-finite target");
    std::copy(s.w_flat.begin(), s.w_flat.end(), inputs.row(i).begin());
    targets[static_cast<std::size_t>(i)] = s.omega_true;
  }

  // Fit in standardized coordinates. The raw weight vectors sit far from the
  // origin in thousands of dimensions; resolving the small differences
  // between them from there forces pre-activations so large the tanh layer
  // saturates into a step function, whose gradient is zero almost everywhere
  // and the penalty goes inert. The affine map is folded back into the first
  // layer below, so the returned estimator still reads raw weight vectors.
  std::vector<double> mu(static_cast<std::size_t>(dim), 0.0);
  std::vector<double> sigma(static_cast<std::size_t>(dim), 1.0);
  for (int j = 0; j < dim; ++j) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += inputs.at(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = inputs.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    mu[static_cast<std::size_t>(j)] = mean;
    // The floor keeps the fold-in rescale of coordinates that barely move
    // across the samples from exploding the first-layer weights.
    sigma[static_cast<std::size_t>(j)] = std::max(std::sqrt(var), 0.01);
    for (int i = 0; i < n; ++i)
      inputs.at(i, j) = (inputs.at(i, j) - mean) / sigma[static_cast<std::size_t>(j)];
  }

  ParamVector xi = make_surrogate_params(dim, config.hidden_units);
  Rng rng(seed);
  init_estimator(xi, rng);
  // Start the head at the target mean (inverse softplus) so the fit only has
  // to learn the variation around it. Climbing from softplus(0) to the
  // working range under Adam takes step-size-bounded progress per epoch, and
  // that pressure is what blows the layer weights up.
  double target_mean = 0.0;
  for (double t : targets) target_mean += t;
  target_mean = std::max(target_mean / static_cast<double>(n), 0.05);
  xi.block("out.b")[0] = std::log(std::expm1(target_mean));
  const std::vector<double> init_values = xi.values;

  auto build = [&](ad::Tape& t, ad::NodeId p) {
    ad::NodeId pred = estimator_forward(t, t.constant(inputs.data), p, xi);
    ad::NodeId diff = t.sub(pred, t.constant(targets));
    return t.add(t.dot(diff, diff), t.scale(t.dot(p, p), config.epsilon));
  };
  ad::Tape tape = ad::forward_record(xi, build);

  SurrogateFitReport local;
  SurrogateFitReport& rep = report ? *report : local;
  rep = SurrogateFitReport{};
  rep.sample_count = n;
  rep.initial_loss = tape.output_value();
  rep.loss_quartiles.assign(5, rep.initial_loss);

  AdamState opt(xi.size(), config.learning_rate);
  double loss = rep.initial_loss;
  bool diverged = false;
  try {
    for (int step = 0; step < config.epochs; ++step) {
      const std::vector<double> grad = tape.backward();
      adam_step(xi, grad, opt);
      tape.set_param(xi.values);
      loss = tape.replay();
      for (int q = 1; q <= 4; ++q)
        if (step + 1 == std::max(1, config.epochs * q / 4)) rep.loss_quartiles[static_cast<std::size_t>(q)] = loss;
    }
  } catch (const NumericError& e) {
    warn(std::string("surrogate fit diverged; keeping the initial estimator (") + e.what() + ")");
    diverged = true;
  }

  if (diverged || loss > rep.initial_loss) {
    xi.values = init_values;
    rep.final_loss = rep.initial_loss;
    rep.reverted_to_init = true;
  } else {
    rep.final_loss = loss;
  }

  // Fold the standardization into the first layer: W x_std + b with
  // x_std = (x - mu) / sigma equals (W / sigma) x + (b - W mu / sigma).
  auto hidden_w = xi.block("hidden.w");
  auto hidden_b = xi.block("hidden.b");
  for (int i = 0; i < config.hidden_units; ++i) {
    double shift = 0.0;
    for (int j = 0; j < dim; ++j) {
      double& wij = hidden_w[static_cast<std::size_t>(i * dim + j)];
      wij /= sigma[static_cast<std::size_t>(j)];
      shift += wij * mu[static_cast<std::size_t>(j)];
    }
    hidden_b[static_cast<std::size_t>(i)] -= shift;
  }
  return xi;
}

ad::NodeId surrogate_penalty(ad::Tape& tape, ad::NodeId w, const ParamVector& xi) {
  const std::vector<int>& shape = xi.block_spec("hidden.w").shape;
  const int input_dim = shape[1];
  if (tape.value_len(w) != input_dim)
    throw ContractError("surrogate penalty: parameter vector has " +
                        std::to_string(tape.value_len(w)) + " entries, estimator expects " +
                        std::to_string(input_dim));
  return estimator_forward(tape, w, tape.constant(xi.values), xi);
}

double surrogate_estimate(const ParamVector& xi, std::span<const double> w) {
  ad::Tape tape;
  return tape.scalar_value(surrogate_penalty(tape, tape.constant(w), xi));
}

void save_samples_csv(std::span<const SurrogateSample> samples, const std::string& path) {
  std::ostringstream out;
  const std::size_t dim = samples.empty() ? 0 : samples[0].w_flat.size();
  out << "epoch_tag,omega_true";
  for (std::size_t d = 0; d < dim; ++d) out << ",w_" << d;
  out << '\n';
  char buf[40];
  for (const SurrogateSample& s : samples) {
    if (s.w_flat.size() != dim)
      throw ContractError("save_samples_csv: ragged sample dimensions");
    out << s.epoch_tag;
    std::snprintf(buf, sizeof(buf), "%.17g", s.omega_true);
    out << ',' << buf;
    for (double v : s.w_flat) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
  atomic_write_file(path, out.str());
}

std::vector<SurrogateSample> load_samples_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty sample file");
  std::vector<SurrogateSample> out;
  int line_no = 1;
  auto parse = [&](const std::string& cell) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc() || ptr != cell.data() + cell.size())
      throw DataError(path + " line " + std::to_string(line_no) + ": cannot parse '" + cell + "'");
    return v;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    SurrogateSample s;
    std::size_t start = 0;
    int field = 0;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      const std::string cell =
          comma == std::string::npos ? line.substr(start) : line.substr(start, comma - start);
      if (field == 0)
        s.epoch_tag = static_cast<int>(parse(cell));
      else if (field == 1)
        s.omega_true = parse(cell);
      else
        s.w_flat.push_back(parse(cell));
      ++field;
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    out.push_back(std::move(s));
  }
  return out;
}

SurrogateContext::SurrogateContext(SurrogateConfig config, OmegaFn omega_fn, std::uint64_t seed)
    : config_(config), omega_(std::move(omega_fn)), rng_(seed) {
  config_.validate();
  if (!omega_) throw ContractError("surrogate context: omega_fn is empty");
}

double SurrogateContext::record_epoch(const ParamVector& w, int epoch) {
  SurrogateSample s = collect_sample(w, omega_, epoch);
  const double omega = s.omega_true;
  samples_.push_back(std::move(s));
  return omega;
}

void SurrogateContext::add_restarts(
    const std::function<std::vector<double>(std::uint64_t)>& unregularized_train) {
  std::vector<SurrogateSample> runs =
      restart_samples(config_.restarts, unregularized_train, omega_, rng_.seed());
  for (SurrogateSample& s : runs) samples_.push_back(std::move(s));
}

std::vector<SurrogateSample> SurrogateContext::windowed(int epoch) const {
  std::vector<SurrogateSample> out;
  for (const SurrogateSample& s : samples_)
    if (s.epoch_tag >= epoch - config_.window && s.epoch_tag <= epoch) out.push_back(s);
  return out;
}

const SurrogateFitReport& SurrogateContext::fit(const ParamVector& current, int epoch) {
  std::vector<SurrogateSample> dataset = windowed(epoch);
  std::vector<SurrogateSample> extra =
      augment(current, config_.augment_count, rng_, omega_, config_.perturb_scale,
              config_.fresh_fraction, epoch);
  for (SurrogateSample& s : extra) dataset.push_back(std::move(s));
  if (static_cast<int>(dataset.size()) < config_.target_samples) {
    std::vector<SurrogateSample> top_up =
        augment(current, config_.target_samples - static_cast<int>(dataset.size()), rng_, omega_,
                config_.perturb_scale, config_.fresh_fraction, epoch);
    for (SurrogateSample& s : top_up) dataset.push_back(std::move(s));
  }
  xi_ = fit_surrogate(dataset, config_, rng_.next_u64(), &report_);
  ++fit_count_;
  return report_;
}

double SurrogateContext::estimate(std::span<const double> w) const {
  if (!ready()) throw ContractError("surrogate not ready: no fit has happened yet");
  return surrogate_estimate(xi_, w);
}

const ParamVector& SurrogateContext::xi() const {
  if (!ready()) throw ContractError("surrogate not ready: no fit has happened yet");
  return xi_;
}

}  // namespace treereg
