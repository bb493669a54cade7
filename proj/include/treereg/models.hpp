#pragma once

#include <string>
#include <vector>

#include "treereg/data.hpp"
#include "treereg/matrix.hpp"
#include "treereg/param_vector.hpp"
#include "treereg/rng.hpp"
#include "treereg/tape.hpp"

namespace treereg {

enum class ModelKind { mlp, gru, hmm, gruhmm };

std::string model_kind_name(ModelKind kind);
ModelKind model_kind_from(const std::string& name);

struct ModelConfig {
  ModelKind kind = ModelKind::mlp;
  int input_dim = 0;
  int output_dim = 1;
  std::vector<int> mlp_hidden = {25};  // hidden layer widths, in order
  int gru_hidden = 20;
  int hmm_states = 5;

  void validate() const;
};

// Block layout for the configured architecture (offsets filled in).
std::vector<BlockSpec> param_layout(const ModelConfig& config);
ParamVector make_params(const ModelConfig& config);
// Weights uniform(-0.1, 0.1); bias blocks stay zero; mix gains start at one.
void init_params(ParamVector& w, Rng& rng);

// Equal-length sequences packed timestep-major: block t holds the t-th row of
// every sequence, so recurrent updates touch one contiguous (batch x dim) slab.
struct SeqBatch {
  int batch = 0;
  int t_len = 0;
  int input_dim = 0;
  int output_dim = 0;
  std::vector<double> x;  // t_len blocks of (batch x input_dim)
  std::vector<double> y;  // t_len blocks of (batch x output_dim)

  // Flat row index of (sequence position b in the batch, timestep t).
  int row(int b, int t) const { return t * batch + b; }
};

SeqBatch pack_batch(const SequenceDataset& data, const std::vector<int>& seq_indices);

struct ForwardNodes {
  ad::NodeId logits = ad::kNoNode;     // (batch * t_len) x output_dim, t-major
  ad::NodeId probs = ad::kNoNode;      // sigmoid(logits)
  ad::NodeId tree_view = ad::kNoNode;  // probabilities the proxy tree approximates
};

// Records the forward pass for a batch; `w` may be a param or a const leaf.
ForwardNodes build_forward(ad::Tape& tape, ad::NodeId w, const ModelConfig& config,
                           const SeqBatch& batch);
// Summed binary cross-entropy of the forward probabilities against batch.y.
ad::NodeId build_bce(ad::Tape& tape, const ForwardNodes& fwd, const SeqBatch& batch);

// Probability matrices (T x L), one per requested sequence, in request order.
// tree_view selects the surface a proxy tree is fit to; it differs from the
// full prediction only for the residual model.
std::vector<Matrix> predict_dataset(const ParamVector& w, const ModelConfig& config,
                                    const SequenceDataset& data, const std::vector<int>& indices,
                                    bool tree_view = false);

// One prediction row per (sequence, timestep), ordered like
// flatten_indices(data, indices, window).origin.
Matrix predict_rows(const ParamVector& w, const ModelConfig& config, const SequenceDataset& data,
                    const std::vector<int>& indices, bool tree_view = false);

// Recorded prediction tapes that can be re-evaluated at many parameter vectors
// (the hot loop when scoring perturbed weights). Rows are ordered like
// predict_rows over the same indices.
class PredictionReplayer {
 public:
  PredictionReplayer(const ModelConfig& config, const SequenceDataset& data,
                     std::vector<int> indices, bool tree_view = false);

  const Matrix& eval(std::span<const double> w_values);
  int row_count() const { return rows_.rows; }

 private:
  struct Group {
    ad::Tape tape;
    ad::NodeId probs = ad::kNoNode;
    std::vector<int> dest_row;  // flat output row for each (b, t) slot, t-major
  };
  std::vector<Group> groups_;
  Matrix rows_;
};

// Plain log-space forward filter over probability-valued parameters; the
// reference semantics the tape construction must reproduce.
struct HmmParams {
  Matrix pi;        // 1 x K
  Matrix a;         // K x K transition, rows sum to 1
  Matrix emission;  // K x F Bernoulli on-probabilities
  Matrix w_out;     // L x K
  Matrix b_out;     // 1 x L
};

HmmParams hmm_params_from(const ParamVector& w, const ModelConfig& config);

struct HmmFilterResult {
  Matrix beliefs;  // T x K posterior p(s_t | x_1..t)
  Matrix probs;    // T x L output probabilities
};

HmmFilterResult hmm_filter(const HmmParams& params, const Matrix& x);

}  // namespace treereg
