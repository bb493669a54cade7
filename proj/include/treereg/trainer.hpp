#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "treereg/common.hpp"
#include "treereg/data.hpp"
#include "treereg/dtree.hpp"
#include "treereg/models.hpp"
#include "treereg/penalty.hpp"
#include "treereg/surrogate.hpp"

namespace treereg {

// Where the training data comes from: a generator task or an ingested CSV.
struct DatasetSpec {
  std::string task = "parabola";  // parabola | signal-noise | csv
  int n = 500;                    // points (parabola) or sequences (signal-noise)
  int t_len = 50;                 // timesteps per sequence (signal-noise)
  double flip_rate = 0.0;         // label noise inside the parabola band
  std::string csv_path;           // task == csv
  bool zscore = false;
  double train_frac = 0.7, valid_frac = 0.0, test_frac = 0.3;

  void validate() const;
};

struct TrainSettings {
  int epochs = 250;
  int batch_size = 100;
  double learning_rate = 1e-3;

  void validate() const;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  ModelConfig model;  // input_dim 0 means "fill from the dataset"
  RegularizerSpec regularizer;
  TrainSettings train;
  SurrogateConfig surrogate;
  TreeConfig tree;
  int tree_window = 1;  // lag window for the per-timestep rows trees see
  // Extra inputs drawn from the task generator and appended to the reference
  // rows the path-length cost is measured on. The train split alone can be
  // too sparse to price boundary shape: on a few hundred points a tilted
  // line costs about as many tree splits as a curve, and the complexity
  // axis of the tradeoff collapses. Requires a generated task, no z-scoring.
  int omega_reference_extra = 0;
  std::uint64_t seed = 0;
  std::vector<double> lambdas;  // sweep grid
  std::vector<RegKind> kinds;   // sweep regularizers
  std::string out_dir = "runs";
  std::string warm_start_checkpoint;  // copy matching blocks from this file

  void validate() const;
};

// The stock sweep grid of 21 regularization strengths, and the shorter grid
// used for the residual model.
std::vector<double> default_lambda_grid();
std::vector<double> residual_lambda_grid();

// Task defaults; overlay a (possibly partial) JSON config on top of them.
// Unknown keys are rejected so typos cannot silently fall back to defaults.
ExperimentConfig preset_config(const std::string& task);
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);

// Materializes the configured dataset, splits it, and optionally z-scores it.
SequenceDataset build_dataset(const DatasetSpec& spec, std::uint64_t seed);

// The model config with input/output dims resolved against the dataset.
ModelConfig resolved_model(const ExperimentConfig& config, const SequenceDataset& data);

// The seeded starting weights every run of an experiment shares, after any
// warm-start blocks have been copied in.
ParamVector initial_params(const ExperimentConfig& config, const SequenceDataset& data);

// Copies every block whose name appears in both vectors; shapes must agree.
int copy_matching_blocks(ParamVector& dest, const ParamVector& source);

// The rows the path-length cost is measured on: the train-split sequences
// plus omega_reference_extra generator-drawn ones, all tagged train. Seeded
// from config.seed only, so every run of a sweep shares the reference.
SequenceDataset omega_reference_data(const ExperimentConfig& config, const SequenceDataset& data);

// True path-length cost of a model on a dataset split: predicts the
// tree-approximated surface over the split's lag-window rows, thresholds at
// 0.5, and scores the distilled trees' summed average path length.
class OmegaEvaluator {
 public:
  OmegaEvaluator(const ModelConfig& model, const SequenceDataset& data, SplitTag tag, int window,
                 TreeConfig tree_config, std::uint64_t seed);

  double value(std::span<const double> w_values);
  double value_with_trees(std::span<const double> w_values, std::vector<DecisionTree>* trees_out);
  const Matrix& reference() const { return reference_; }
  OmegaFn as_fn();  // closure over this evaluator (which must outlive it)

 private:
  PredictionReplayer replayer_;
  Matrix reference_;
  TreeConfig tree_config_;
  std::uint64_t seed_;
};

// Appends forward pass, summed BCE, and the penalty share for one batch:
// loss = BCE(batch) + lambda_share * Psi(w). Pass lambda_share 0 to train
// unregularized; the sweep passes lambda * batch / train_count so the shares
// total lambda * Psi once per epoch.
ad::NodeId build_batch_objective(ad::Tape& tape, ad::NodeId w, const ModelConfig& model,
                                 const SeqBatch& batch, const RegularizerSpec& spec,
                                 const ParamVector* xi, double lambda_share);

struct EpochTrace {
  int epoch = 0;          // negative rows are the unregularized warm-start phase
  double loss = 0.0;      // summed objective over the epoch's batches
  double omega_true = 0.0;
  double omega_hat = 0.0;  // NaN before the first surrogate fit / non-tree kinds
};

struct TrainResult {
  ParamVector weights;
  std::vector<EpochTrace> trace;
  int surrogate_fits = 0;
  double final_train_loss = 0.0;
  double wall_time_s = 0.0;
};

// Loss went non-finite; carries the per-epoch trace collected so far.
struct TrainingDiverged : NumericError {
  TrainingDiverged(const std::string& msg, std::vector<EpochTrace> trace_so_far)
      : NumericError(msg), trace(std::move(trace_so_far)) {}
  std::vector<EpochTrace> trace;
};

// Minibatch Adam on lambda * Psi(w) + summed BCE. Initial weights depend only
// on config.seed (and any warm-start checkpoint); the shuffle stream is salted
// with run_index so sweep runs decorrelate. Tree-kind runs first train
// unregularized for surrogate.restart_epochs epochs (recorded with negative
// epoch numbers), buffer restart checkpoints, and refit the surrogate at every
// epoch = 0 mod retrain_every, starting at epoch 0.
TrainResult train_model(const ExperimentConfig& config, const SequenceDataset& data,
                        std::uint64_t run_index = 0);

std::string trace_to_csv(std::span<const EpochTrace> trace);

}  // namespace treereg
