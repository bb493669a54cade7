#include "treereg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <utility>

#include <nlohmann/json.hpp>

#include "treereg/adam.hpp"

namespace treereg {

namespace {

using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
// Salt separating the surrogate's draw stream from the batch-shuffle stream.
constexpr std::uint64_t kSurrogateSalt = 0x5347a7e5eedULL;
constexpr std::uint64_t kReferenceSalt = 0x2ef3a11c9bULL;

void check_keys(const json& j, const std::string& ctx, std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) { known = true; break; }
    }
    if (!known) throw DataError("config: unknown key \"" + item.key() + "\" in " + ctx);
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Equal-length minibatches: bucket the indices by sequence length, shuffle
// within buckets, then shuffle the batch order.
std::vector<std::vector<int>> make_batches(const SequenceDataset& data,
                                           const std::vector<int>& indices, int batch_size,
                                           Rng& rng) {
  std::map<int, std::vector<int>> by_len;
  for (int i : indices) by_len[data.sequences[static_cast<std::size_t>(i)].x.rows].push_back(i);

  std::vector<std::vector<int>> batches;
  for (auto& [t_len, bucket] : by_len) {
    rng.shuffle(std::span<int>(bucket));
    for (std::size_t start = 0; start < bucket.size(); start += static_cast<std::size_t>(batch_size)) {
      std::size_t stop = std::min(bucket.size(), start + static_cast<std::size_t>(batch_size));
      batches.emplace_back(bucket.begin() + static_cast<std::ptrdiff_t>(start),
                           bucket.begin() + static_cast<std::ptrdiff_t>(stop));
    }
  }
  rng.shuffle(std::span<std::vector<int>>(batches));
  return batches;
}

}  // namespace

void DatasetSpec::validate() const {
  if (task != "parabola" && task != "signal-noise" && task != "csv")
    throw ContractError("dataset: unknown task \"" + task + "\"");
  if (n < 1) throw ContractError("dataset: n must be >= 1");
  if (t_len < 1) throw ContractError("dataset: t_len must be >= 1");
  if (!(flip_rate >= 0.0 && flip_rate <= 1.0))
    throw ContractError("dataset: flip_rate must lie in [0, 1]");
  if (task == "csv" && csv_path.empty())
    throw ContractError("dataset: task csv needs csv_path");
  double total = train_frac + valid_frac + test_frac;
  if (std::abs(total - 1.0) > 1e-9)
    throw ContractError("dataset: split fractions must sum to 1, got " + std::to_string(total));
}

void TrainSettings::validate() const {
  if (epochs < 1) throw ContractError("train: epochs must be >= 1");
  if (batch_size < 1) throw ContractError("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ContractError("train: learning_rate must be positive and finite");
}

void ExperimentConfig::validate() const {
  dataset.validate();
  regularizer.validate();
  train.validate();
  surrogate.validate();
  if (tree.min_leaf_samples < 1) throw ContractError("tree: min_leaf_samples must be >= 1");
  if (tree_window < 1) throw ContractError("tree: window must be >= 1");
  if (omega_reference_extra < 0)
    throw ContractError("tree: omega_reference_extra must be >= 0");
  if (omega_reference_extra > 0 && dataset.task == "csv")
    throw ContractError("tree: omega_reference_extra needs a generated task, csv has no generator");
  if (omega_reference_extra > 0 && dataset.zscore)
    throw ContractError("tree: omega_reference_extra does not support z-scored features");
  for (double l : lambdas)
    if (!(l >= 0.0)) throw ContractError("sweep: lambdas must be >= 0");
}

std::vector<double> default_lambda_grid() {
  return {0.1,  0.5,  1,    5,    10,    25,    50,    75,    100,    250,   500,
          750,  1000, 2500, 5000, 7500,  10000, 25000, 50000, 75000,  100000};
}

std::vector<double> residual_lambda_grid() {
  return {1, 10, 50, 200, 500, 900, 2000, 5000, 7000};
}

ExperimentConfig preset_config(const std::string& task) {
  ExperimentConfig c;
  c.dataset.task = task;
  c.lambdas = default_lambda_grid();
  c.kinds = {RegKind::l1, RegKind::l2, RegKind::tree};
  if (task == "parabola") {
    c.dataset.n = 500;
    c.dataset.flip_rate = 0.1;  // labels near the boundary are noisy by design
    c.dataset.train_frac = 0.7;
    c.dataset.valid_frac = 0.0;
    c.dataset.test_frac = 0.3;
    c.model.kind = ModelKind::mlp;
    c.model.mlp_hidden = {100, 100, 10};
    c.train = {250, 100, 1e-3};
    c.surrogate.epochs = 500;
    c.surrogate.retrain_every = 100;
    c.surrogate.window = 100;
    c.tree.min_leaf_samples = 1;
    c.tree.prune = false;
    c.tree_window = 1;
    c.omega_reference_extra = 25000;
  } else if (task == "signal-noise") {
    c.dataset.n = 100;
    c.dataset.t_len = 50;
    c.dataset.train_frac = 0.6;
    c.dataset.valid_frac = 0.2;
    c.dataset.test_frac = 0.2;
    c.model.kind = ModelKind::gru;
    c.model.gru_hidden = 20;
    c.model.hmm_states = 5;
    c.train = {300, 10, 1e-2};
    c.surrogate.epochs = 1000;
    c.surrogate.retrain_every = 50;
    c.surrogate.window = 50;
    c.tree.min_leaf_samples = 25;
    c.tree.prune = true;
    c.tree_window = 5;
  } else if (task == "csv") {
    c.dataset.zscore = true;
    c.dataset.train_frac = 0.6;
    c.dataset.valid_frac = 0.2;
    c.dataset.test_frac = 0.2;
    c.model.kind = ModelKind::gru;
    c.train = {300, 256, 1e-3};
    c.surrogate.epochs = 5000;
    c.surrogate.retrain_every = 25;
    c.surrogate.window = 50;
    c.surrogate.learning_rate = 1e-3;
    c.surrogate.target_samples = 100;
    c.tree.min_leaf_samples = 1000;
    c.tree.prune = true;
    c.tree_window = 1;
  } else {
    throw DataError("unknown task \"" + task + "\"; expected parabola, signal-noise, or csv");
  }
  return c;
}

ExperimentConfig config_from_json(const json& j) {
  try {
    check_keys(j, "the top level",
               {"dataset", "model", "regularizer", "train", "surrogate", "tree", "seed",
                "lambdas", "kinds", "out_dir", "warm_start_checkpoint"});
    std::string task = "parabola";
    if (j.contains("dataset") && j.at("dataset").contains("task"))
      j.at("dataset").at("task").get_to(task);
    ExperimentConfig c = preset_config(task);

    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      check_keys(d, "dataset", {"task", "n", "t_len", "flip_rate", "csv_path", "zscore",
                                "train_frac", "valid_frac", "test_frac"});
      if (d.contains("n")) d.at("n").get_to(c.dataset.n);
      if (d.contains("t_len")) d.at("t_len").get_to(c.dataset.t_len);
      if (d.contains("flip_rate")) d.at("flip_rate").get_to(c.dataset.flip_rate);
      if (d.contains("csv_path")) d.at("csv_path").get_to(c.dataset.csv_path);
      if (d.contains("zscore")) d.at("zscore").get_to(c.dataset.zscore);
      if (d.contains("train_frac")) d.at("train_frac").get_to(c.dataset.train_frac);
      if (d.contains("valid_frac")) d.at("valid_frac").get_to(c.dataset.valid_frac);
      if (d.contains("test_frac")) d.at("test_frac").get_to(c.dataset.test_frac);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m, "model", {"kind", "mlp_hidden", "gru_hidden", "hmm_states", "output_dim"});
      if (m.contains("kind")) c.model.kind = model_kind_from(m.at("kind").get<std::string>());
      if (m.contains("mlp_hidden")) m.at("mlp_hidden").get_to(c.model.mlp_hidden);
      if (m.contains("gru_hidden")) m.at("gru_hidden").get_to(c.model.gru_hidden);
      if (m.contains("hmm_states")) m.at("hmm_states").get_to(c.model.hmm_states);
      if (m.contains("output_dim")) m.at("output_dim").get_to(c.model.output_dim);
    }
    if (j.contains("regularizer")) {
      const json& r = j.at("regularizer");
      check_keys(r, "regularizer", {"kind", "lambda", "alpha"});
      if (r.contains("kind")) c.regularizer.kind = reg_kind_from(r.at("kind").get<std::string>());
      if (r.contains("lambda")) r.at("lambda").get_to(c.regularizer.lambda);
      if (r.contains("alpha")) r.at("alpha").get_to(c.regularizer.alpha);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      check_keys(t, "train", {"epochs", "batch_size", "learning_rate"});
      if (t.contains("epochs")) t.at("epochs").get_to(c.train.epochs);
      if (t.contains("batch_size")) t.at("batch_size").get_to(c.train.batch_size);
      if (t.contains("learning_rate")) t.at("learning_rate").get_to(c.train.learning_rate);
    }
    if (j.contains("surrogate")) {
      const json& s = j.at("surrogate");
      check_keys(s, "surrogate",
                 {"hidden_units", "epsilon", "window", "retrain_every", "target_samples",
                  "augment_count", "restarts", "restart_epochs", "learning_rate", "epochs",
                  "perturb_scale", "fresh_fraction"});
      if (s.contains("hidden_units")) s.at("hidden_units").get_to(c.surrogate.hidden_units);
      if (s.contains("epsilon")) s.at("epsilon").get_to(c.surrogate.epsilon);
      if (s.contains("window")) s.at("window").get_to(c.surrogate.window);
      if (s.contains("retrain_every")) s.at("retrain_every").get_to(c.surrogate.retrain_every);
      if (s.contains("target_samples")) s.at("target_samples").get_to(c.surrogate.target_samples);
      if (s.contains("augment_count")) s.at("augment_count").get_to(c.surrogate.augment_count);
      if (s.contains("restarts")) s.at("restarts").get_to(c.surrogate.restarts);
      if (s.contains("restart_epochs")) s.at("restart_epochs").get_to(c.surrogate.restart_epochs);
      if (s.contains("learning_rate")) s.at("learning_rate").get_to(c.surrogate.learning_rate);
      if (s.contains("epochs")) s.at("epochs").get_to(c.surrogate.epochs);
      if (s.contains("perturb_scale")) s.at("perturb_scale").get_to(c.surrogate.perturb_scale);
      if (s.contains("fresh_fraction")) s.at("fresh_fraction").get_to(c.surrogate.fresh_fraction);
    }
    if (j.contains("tree")) {
      const json& t = j.at("tree");
      check_keys(t, "tree", {"min_leaf_samples", "prune", "window", "reference_extra"});
      if (t.contains("min_leaf_samples")) t.at("min_leaf_samples").get_to(c.tree.min_leaf_samples);
      if (t.contains("prune")) t.at("prune").get_to(c.tree.prune);
      if (t.contains("window")) t.at("window").get_to(c.tree_window);
      if (t.contains("reference_extra")) t.at("reference_extra").get_to(c.omega_reference_extra);
    }
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("lambdas")) j.at("lambdas").get_to(c.lambdas);
    if (j.contains("kinds")) {
      c.kinds.clear();
      for (const json& k : j.at("kinds")) c.kinds.push_back(reg_kind_from(k.get<std::string>()));
    }
    if (j.contains("out_dir")) j.at("out_dir").get_to(c.out_dir);
    if (j.contains("warm_start_checkpoint"))
      j.at("warm_start_checkpoint").get_to(c.warm_start_checkpoint);

    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  }
}

json config_to_json(const ExperimentConfig& c) {
  json kinds = json::array();
  for (RegKind k : c.kinds) kinds.push_back(reg_kind_name(k));
  return json{
      {"dataset",
       {{"task", c.dataset.task},
        {"n", c.dataset.n},
        {"t_len", c.dataset.t_len},
        {"flip_rate", c.dataset.flip_rate},
        {"csv_path", c.dataset.csv_path},
        {"zscore", c.dataset.zscore},
        {"train_frac", c.dataset.train_frac},
        {"valid_frac", c.dataset.valid_frac},
        {"test_frac", c.dataset.test_frac}}},
      {"model",
       {{"kind", model_kind_name(c.model.kind)},
        {"mlp_hidden", c.model.mlp_hidden},
        {"gru_hidden", c.model.gru_hidden},
        {"hmm_states", c.model.hmm_states},
        {"output_dim", c.model.output_dim}}},
      {"regularizer",
       {{"kind", reg_kind_name(c.regularizer.kind)},
        {"lambda", c.regularizer.lambda},
        {"alpha", c.regularizer.alpha}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate}}},
      {"surrogate",
       {{"hidden_units", c.surrogate.hidden_units},
        {"epsilon", c.surrogate.epsilon},
        {"window", c.surrogate.window},
        {"retrain_every", c.surrogate.retrain_every},
        {"target_samples", c.surrogate.target_samples},
        {"augment_count", c.surrogate.augment_count},
        {"restarts", c.surrogate.restarts},
        {"restart_epochs", c.surrogate.restart_epochs},
        {"learning_rate", c.surrogate.learning_rate},
        {"epochs", c.surrogate.epochs},
        {"perturb_scale", c.surrogate.perturb_scale},
        {"fresh_fraction", c.surrogate.fresh_fraction}}},
      {"tree",
       {{"min_leaf_samples", c.tree.min_leaf_samples},
        {"prune", c.tree.prune},
        {"window", c.tree_window},
        {"reference_extra", c.omega_reference_extra}}},
      {"seed", c.seed},
      {"lambdas", c.lambdas},
      {"kinds", kinds},
      {"out_dir", c.out_dir},
      {"warm_start_checkpoint", c.warm_start_checkpoint},
  };
}

SequenceDataset build_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  SequenceDataset data;
  bool has_splits = false;
  if (spec.task == "parabola") {
    data = gen_parabola(spec.n, spec.flip_rate, seed);
  } else if (spec.task == "signal-noise") {
    data = gen_signal_noise(spec.n, spec.t_len, seed);
  } else {
    data = ingest_csv(spec.csv_path);
    // A split column in the file wins over the configured fractions.
    has_splits = !data.indices_of(SplitTag::valid).empty() ||
                 !data.indices_of(SplitTag::test).empty();
  }
  if (!has_splits)
    assign_splits(data, spec.train_frac, spec.valid_frac, spec.test_frac, seed);
  if (spec.zscore) zscore(data);
  return data;
}

ModelConfig resolved_model(const ExperimentConfig& config, const SequenceDataset& data) {
  ModelConfig model = config.model;
  model.input_dim = data.n_features();
  model.output_dim = data.n_labels();
  model.validate();
  return model;
}

SequenceDataset omega_reference_data(const ExperimentConfig& config, const SequenceDataset& data) {
  SequenceDataset ref;
  ref.feature_names = data.feature_names;
  ref.label_names = data.label_names;
  for (std::size_t i = 0; i < data.sequences.size(); ++i) {
    if (data.split_tag[i] != static_cast<int>(SplitTag::train)) continue;
    ref.sequences.push_back(data.sequences[i]);
    ref.split_tag.push_back(static_cast<int>(SplitTag::train));
  }
  if (config.omega_reference_extra > 0) {
    DatasetSpec extra = config.dataset;
    extra.n = config.omega_reference_extra;
    extra.train_frac = 1.0;
    extra.valid_frac = 0.0;
    extra.test_frac = 0.0;
    // Fixed salt: every run of a sweep measures path length on the same rows.
    SequenceDataset drawn = build_dataset(extra, config.seed ^ kReferenceSalt);
    for (Sequence& s : drawn.sequences) {
      s.id = "ref:" + s.id;
      ref.sequences.push_back(std::move(s));
      ref.split_tag.push_back(static_cast<int>(SplitTag::train));
    }
  }
  return ref;
}

int copy_matching_blocks(ParamVector& dest, const ParamVector& source) {
  int copied = 0;
  for (const BlockSpec& spec : dest.blocks) {
    if (!source.has_block(spec.name)) continue;
    const BlockSpec& from = source.block_spec(spec.name);
    if (from.shape != spec.shape)
      throw ContractError("warm start: block \"" + spec.name + "\" has mismatched shape");
    std::span<double> d = dest.block(spec.name);
    std::span<const double> s = source.block(spec.name);
    std::copy(s.begin(), s.end(), d.begin());
    ++copied;
  }
  return copied;
}

ParamVector initial_params(const ExperimentConfig& config, const SequenceDataset& data) {
  ModelConfig model = resolved_model(config, data);
  ParamVector w = make_params(model);
  Rng rng(config.seed);
  init_params(w, rng);
  if (!config.warm_start_checkpoint.empty()) {
    ParamVector source = ParamVector::load(config.warm_start_checkpoint);
    if (copy_matching_blocks(w, source) == 0)
      warn("warm start: no block of " + config.warm_start_checkpoint + " matched the model");
  }
  return w;
}

OmegaEvaluator::OmegaEvaluator(const ModelConfig& model, const SequenceDataset& data, SplitTag tag,
                               int window, TreeConfig tree_config, std::uint64_t seed)
    : replayer_(model, data, data.indices_of(tag), /*tree_view=*/true),
      tree_config_(tree_config),
      seed_(seed) {
  FlatRows rows = flatten(data, tag, window);
  reference_ = std::move(rows.x);
  if (reference_.rows != replayer_.row_count())
    throw ContractError("omega evaluator: reference rows do not match prediction rows");
}

double OmegaEvaluator::value(std::span<const double> w_values) {
  return omega(reference_, replayer_.eval(w_values), tree_config_, seed_);
}

double OmegaEvaluator::value_with_trees(std::span<const double> w_values,
                                        std::vector<DecisionTree>* trees_out) {
  return omega_with_trees(reference_, replayer_.eval(w_values), tree_config_, seed_, trees_out);
}

OmegaFn OmegaEvaluator::as_fn() {
  return [this](std::span<const double> w_values) { return value(w_values); };
}

ad::NodeId build_batch_objective(ad::Tape& tape, ad::NodeId w, const ModelConfig& model,
                                 const SeqBatch& batch, const RegularizerSpec& spec,
                                 const ParamVector* xi, double lambda_share) {
  ForwardNodes fwd = build_forward(tape, w, model, batch);
  ad::NodeId loss = build_bce(tape, fwd, batch);
  if (spec.kind != RegKind::none && lambda_share != 0.0)
    loss = tape.add(loss, tape.scale(build_penalty(tape, w, spec, xi), lambda_share));
  return loss;
}

TrainResult train_model(const ExperimentConfig& config, const SequenceDataset& data,
                        std::uint64_t run_index) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  data.validate();
  const ModelConfig model = resolved_model(config, data);
  const RegularizerSpec& spec = config.regularizer;
  const bool tree_kind = spec.kind == RegKind::tree;

  const std::vector<int> train_idx = data.indices_of(SplitTag::train);
  if (train_idx.empty()) throw ContractError("train_model: train split is empty");
  const double train_count = static_cast<double>(train_idx.size());

  ParamVector w = initial_params(config, data);
  AdamState adam(w.size(), config.train.learning_rate);
  Rng shuffle_rng(config.seed ^ run_index);

  std::optional<SequenceDataset> omega_ref;
  if (config.omega_reference_extra > 0) omega_ref = omega_reference_data(config, data);
  OmegaEvaluator omega_eval(model, omega_ref ? *omega_ref : data, SplitTag::train,
                            config.tree_window, config.tree, config.seed);
  std::optional<SurrogateContext> surrogate;

  TrainResult result;

  // One pass over the train split; updates `weights` in place and returns the
  // summed objective. lambda 0 trains unregularized regardless of kind.
  auto run_epoch = [&](ParamVector& weights, AdamState& state, Rng& rng, double lambda,
                       const ParamVector* xi) {
    double total = 0.0;
    for (const std::vector<int>& batch_idx :
         make_batches(data, train_idx, config.train.batch_size, rng)) {
      SeqBatch batch = pack_batch(data, batch_idx);
      double share = lambda * static_cast<double>(batch.batch) / train_count;
      ad::Tape tape;
      ad::NodeId p = tape.param(weights.values);
      tape.mark_output(build_batch_objective(tape, p, model, batch, spec, xi, share));
      total += tape.output_value();
      adam_step(weights, tape.backward(), state);
    }
    if (!std::isfinite(total)) throw NumericError("epoch loss went non-finite");
    return total;
  };

  try {
    if (tree_kind) {
      surrogate.emplace(config.surrogate, omega_eval.as_fn(),
                        (config.seed ^ run_index) ^ kSurrogateSalt);
      // Unregularized warm start; its checkpoints seed the first fit (tag 0).
      for (int e = 0; e < config.surrogate.restart_epochs; ++e) {
        double loss = run_epoch(w, adam, shuffle_rng, 0.0, nullptr);
        double om = surrogate->record_epoch(w, 0);
        result.trace.push_back({e - config.surrogate.restart_epochs, loss, om, kNaN});
      }
      surrogate->add_restarts([&](std::uint64_t restart_seed) {
        Rng rng(restart_seed);
        ParamVector wr = make_params(model);
        init_params(wr, rng);
        AdamState restart_adam(wr.size(), config.train.learning_rate);
        for (int e = 0; e < config.surrogate.restart_epochs; ++e)
          run_epoch(wr, restart_adam, rng, 0.0, nullptr);
        return wr.values;
      });
    }

    for (int epoch = 0; epoch < config.train.epochs; ++epoch) {
      if (tree_kind && surrogate->due(epoch)) {
        surrogate->fit(w, epoch);
        result.surrogate_fits = surrogate->fit_count();
      }
      const ParamVector* xi = tree_kind ? &surrogate->xi() : nullptr;
      double loss = run_epoch(w, adam, shuffle_rng, spec.lambda, xi);
      double omega_true =
          tree_kind ? surrogate->record_epoch(w, epoch) : omega_eval.value(w.values);
      double omega_hat =
          tree_kind && surrogate->ready() ? surrogate->estimate(w.values) : kNaN;
      result.trace.push_back({epoch, loss, omega_true, omega_hat});
    }
  } catch (const NumericError& e) {
    throw TrainingDiverged(std::string("training diverged: ") + e.what(),
                           std::move(result.trace));
  }

  result.weights = std::move(w);
  result.final_train_loss = result.trace.empty() ? 0.0 : result.trace.back().loss;
  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

std::string trace_to_csv(std::span<const EpochTrace> trace) {
  std::string out = "epoch,loss,omega_true,omega_hat\n";
  for (const EpochTrace& row : trace) {
    out += std::to_string(row.epoch);
    out += ',';
    out += fmt_double(row.loss);
    out += ',';
    out += fmt_double(row.omega_true);
    out += ',';
    out += fmt_double(row.omega_hat);
    out += '\n';
  }
  return out;
}

}  // namespace treereg
