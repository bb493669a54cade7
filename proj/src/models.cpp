#include "treereg/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "treereg/common.hpp"

namespace treereg {

namespace {

using ad::NodeId;
using ad::Tape;

std::vector<int> layer_dims(const ModelConfig& c) {
  std::vector<int> dims;
  dims.push_back(c.input_dim);
  dims.insert(dims.end(), c.mlp_hidden.begin(), c.mlp_hidden.end());
  dims.push_back(c.output_dim);
  return dims;
}

void append_mlp_blocks(std::vector<std::pair<std::string, std::vector<int>>>& defs,
                       const ModelConfig& c) {
  const std::vector<int> dims = layer_dims(c);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::string tag = "layer" + std::to_string(i);
    defs.push_back({tag + ".w", {dims[i + 1], dims[i]}});
    defs.push_back({tag + ".b", {dims[i + 1]}});
  }
}

void append_gru_blocks(std::vector<std::pair<std::string, std::vector<int>>>& defs,
                       const ModelConfig& c) {
  const int f = c.input_dim, h = c.gru_hidden, l = c.output_dim;
  for (const char* gate : {"z", "r", "h"}) {
    defs.push_back({std::string("gru.w") + gate, {h, f}});
    defs.push_back({std::string("gru.u") + gate, {h, h}});
    defs.push_back({std::string("gru.b") + gate, {h}});
  }
  defs.push_back({"gru.out.w", {l, h}});
  defs.push_back({"gru.out.b", {l}});
}

void append_hmm_blocks(std::vector<std::pair<std::string, std::vector<int>>>& defs,
                       const ModelConfig& c) {
  const int k = c.hmm_states, f = c.input_dim, l = c.output_dim;
  defs.push_back({"hmm.pi", {k}});
  defs.push_back({"hmm.a", {k, k}});
  defs.push_back({"hmm.phi", {k, f}});
  defs.push_back({"hmm.out.w", {l, k}});
  defs.push_back({"hmm.out.b", {l}});
}

// Resolves parameter blocks to slice nodes of `w` for one recorded forward.
class BlockSlices {
 public:
  BlockSlices(Tape& tape, NodeId w, const ModelConfig& config)
      : tape_(tape), w_(w), layout_(param_layout(config)) {}

  NodeId operator()(const std::string& name) {
    for (const BlockSpec& b : layout_)
      if (b.name == name)
        return tape_.slice(w_, static_cast<int>(b.offset), static_cast<int>(b.size()));
    throw ContractError("forward: no parameter block named " + name);
  }

 private:
  Tape& tape_;
  NodeId w_;
  std::vector<BlockSpec> layout_;
};

NodeId x_block(Tape& tape, const SeqBatch& batch, int t) {
  const std::size_t stride = static_cast<std::size_t>(batch.batch) * batch.input_dim;
  return tape.constant({batch.x.data() + static_cast<std::size_t>(t) * stride, stride});
}

NodeId build_mlp_logits(Tape& tape, NodeId w, const ModelConfig& c, const SeqBatch& batch) {
  BlockSlices blk(tape, w, c);
  const std::vector<int> dims = layer_dims(c);
  // No recurrence, so all batch * t_len rows go through one stack of layers.
  NodeId h = tape.constant(batch.x);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::string tag = "layer" + std::to_string(i);
    h = tape.linear(h, blk(tag + ".w"), blk(tag + ".b"), dims[i], dims[i + 1]);
    if (i + 2 < dims.size()) h = tape.tanh(h);
  }
  return h;
}

// One (batch x output_dim) logit node per timestep.
std::vector<NodeId> build_gru_logits(Tape& tape, NodeId w, const ModelConfig& c,
                                     const SeqBatch& batch) {
  BlockSlices blk(tape, w, c);
  const int f = c.input_dim, h = c.gru_hidden, l = c.output_dim;
  const NodeId wz = blk("gru.wz"), uz = blk("gru.uz"), bz = blk("gru.bz");
  const NodeId wr = blk("gru.wr"), ur = blk("gru.ur"), br = blk("gru.br");
  const NodeId wh = blk("gru.wh"), uh = blk("gru.uh"), bh = blk("gru.bh");
  const NodeId wo = blk("gru.out.w"), bo = blk("gru.out.b");
  const std::vector<double> zeros(static_cast<std::size_t>(batch.batch) * h, 0.0);
  NodeId state = tape.constant(zeros);
  std::vector<NodeId> logits;
  logits.reserve(static_cast<std::size_t>(batch.t_len));
  for (int t = 0; t < batch.t_len; ++t) {
    const NodeId xt = x_block(tape, batch, t);
    const NodeId z = tape.sigmoid(
        tape.add(tape.linear(xt, wz, bz, f, h), tape.linear(state, uz, ad::kNoNode, h, h)));
    const NodeId r = tape.sigmoid(
        tape.add(tape.linear(xt, wr, br, f, h), tape.linear(state, ur, ad::kNoNode, h, h)));
    const NodeId cand = tape.tanh(tape.add(tape.linear(xt, wh, bh, f, h),
                                           tape.linear(tape.mul(r, state), uh, ad::kNoNode, h, h)));
    state = tape.add(tape.mul(tape.one_minus(z), state), tape.mul(z, cand));
    logits.push_back(tape.linear(state, wo, bo, h, l));
  }
  return logits;
}

std::vector<NodeId> build_hmm_logits(Tape& tape, NodeId w, const ModelConfig& c,
                                     const SeqBatch& batch) {
  BlockSlices blk(tape, w, c);
  const int f = c.input_dim, k = c.hmm_states, l = c.output_dim;
  const NodeId log_pi = tape.log_softmax_rows(blk("hmm.pi"), 1, k);
  const NodeId log_a = tape.log_softmax_rows(blk("hmm.a"), k, k);
  const NodeId phi = blk("hmm.phi");
  // Bernoulli logits: log p = -softplus(-z), log(1-p) = -softplus(z).
  const NodeId log_on = tape.neg(tape.softplus(tape.neg(phi)));
  const NodeId log_off = tape.neg(tape.softplus(phi));
  const NodeId wo = blk("hmm.out.w"), bo = blk("hmm.out.b");
  const NodeId ones = tape.constant(std::vector<double>(static_cast<std::size_t>(batch.batch), 1.0));
  NodeId alpha = ad::kNoNode;
  std::vector<NodeId> logits;
  logits.reserve(static_cast<std::size_t>(batch.t_len));
  for (int t = 0; t < batch.t_len; ++t) {
    const NodeId xt = x_block(tape, batch, t);
    const NodeId loglik = tape.add(tape.linear(xt, log_on, ad::kNoNode, f, k),
                                   tape.linear(tape.one_minus(xt), log_off, ad::kNoNode, f, k));
    const NodeId prior = t == 0 ? tape.linear(ones, log_pi, ad::kNoNode, 1, k)
                                : tape.lse_matvec(alpha, log_a, k, k);
    alpha = tape.add(prior, loglik);
    const NodeId beliefs = tape.exp(tape.log_softmax_rows(alpha, batch.batch, k));
    logits.push_back(tape.linear(beliefs, wo, bo, k, l));
  }
  return logits;
}

}  // namespace

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::mlp: return "mlp";
    case ModelKind::gru: return "gru";
    case ModelKind::hmm: return "hmm";
    case ModelKind::gruhmm: return "gruhmm";
  }
  throw ContractError("unknown model kind");
}

ModelKind model_kind_from(const std::string& name) {
  if (name == "mlp") return ModelKind::mlp;
  if (name == "gru") return ModelKind::gru;
  if (name == "hmm") return ModelKind::hmm;
  if (name == "gruhmm") return ModelKind::gruhmm;
  throw DataError("unknown model kind '" + name + "' (expected mlp, gru, hmm, or gruhmm)");
}

void ModelConfig::validate() const {
  if (input_dim <= 0) throw ContractError("model config: input_dim must be positive");
  if (output_dim <= 0) throw ContractError("model config: output_dim must be positive");
  if (kind == ModelKind::mlp)
    for (int h : mlp_hidden)
      if (h <= 0) throw ContractError("model config: hidden widths must be positive");
  if ((kind == ModelKind::gru || kind == ModelKind::gruhmm) && gru_hidden <= 0)
    throw ContractError("model config: gru_hidden must be positive");
  if ((kind == ModelKind::hmm || kind == ModelKind::gruhmm) && hmm_states <= 0)
    throw ContractError("model config: hmm_states must be positive");
}

std::vector<BlockSpec> param_layout(const ModelConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, std::vector<int>>> defs;
  switch (config.kind) {
    case ModelKind::mlp: append_mlp_blocks(defs, config); break;
    case ModelKind::gru: append_gru_blocks(defs, config); break;
    case ModelKind::hmm: append_hmm_blocks(defs, config); break;
    case ModelKind::gruhmm:
      append_hmm_blocks(defs, config);
      append_gru_blocks(defs, config);
      defs.push_back({"mix.gamma", {config.output_dim}});
      break;
  }
  std::vector<BlockSpec> layout;
  std::int64_t offset = 0;
  for (auto& [name, shape] : defs) {
    BlockSpec spec{name, shape, offset};
    offset += spec.size();
    layout.push_back(std::move(spec));
  }
  return layout;
}

ParamVector make_params(const ModelConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, std::vector<int>>> defs;
  for (const BlockSpec& spec : param_layout(config)) defs.push_back({spec.name, spec.shape});
  return ParamVector::create(defs);
}

void init_params(ParamVector& w, Rng& rng) {
  for (const BlockSpec& spec : w.blocks) {
    const std::size_t dot = spec.name.rfind('.');
    const std::string leaf = dot == std::string::npos ? spec.name : spec.name.substr(dot + 1);
    auto values = w.block(spec.name);
    if (leaf == "b" || leaf == "bz" || leaf == "br" || leaf == "bh") {
      std::fill(values.begin(), values.end(), 0.0);
    } else if (leaf == "gamma") {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (spec.shape.size() == 2) {
      // Glorot range: keeps activations near unit scale whatever the layer
      // widths. A fixed small range starves the deeper stacks of gradient
      // signal and they stall (or fall into a constant-output basin).
      const double limit = std::sqrt(6.0 / (spec.shape[0] + spec.shape[1]));
      for (double& v : values) v = rng.uniform(-limit, limit);
    } else {
      for (double& v : values) v = rng.uniform(-0.1, 0.1);
    }
  }
}

SeqBatch pack_batch(const SequenceDataset& data, const std::vector<int>& seq_indices) {
  if (seq_indices.empty()) throw ContractError("pack_batch: empty batch");
  SeqBatch batch;
  batch.batch = static_cast<int>(seq_indices.size());
  batch.t_len = data.sequences[static_cast<std::size_t>(seq_indices[0])].x.rows;
  batch.input_dim = data.n_features();
  batch.output_dim = data.n_labels();
  batch.x.assign(static_cast<std::size_t>(batch.batch) * batch.t_len * batch.input_dim, 0.0);
  batch.y.assign(static_cast<std::size_t>(batch.batch) * batch.t_len * batch.output_dim, 0.0);
  for (int b = 0; b < batch.batch; ++b) {
    const Sequence& s = data.sequences[static_cast<std::size_t>(seq_indices[static_cast<std::size_t>(b)])];
    if (s.x.rows != batch.t_len)
      throw ContractError("pack_batch: sequence " + s.id + " has length " +
                          std::to_string(s.x.rows) + ", batch expects " +
                          std::to_string(batch.t_len));
    for (int t = 0; t < batch.t_len; ++t) {
      const int row = batch.row(b, t);
      std::copy(s.x.row(t).begin(), s.x.row(t).end(),
                batch.x.begin() + static_cast<std::size_t>(row) * batch.input_dim);
      std::copy(s.y.row(t).begin(), s.y.row(t).end(),
                batch.y.begin() + static_cast<std::size_t>(row) * batch.output_dim);
    }
  }
  return batch;
}

ForwardNodes build_forward(Tape& tape, NodeId w, const ModelConfig& config,
                           const SeqBatch& batch) {
  config.validate();
  if (batch.input_dim != config.input_dim || batch.output_dim != config.output_dim)
    throw ContractError("forward: batch dims (" + std::to_string(batch.input_dim) + ", " +
                        std::to_string(batch.output_dim) + ") do not match model config");
  ForwardNodes out;
  switch (config.kind) {
    case ModelKind::mlp:
      out.logits = build_mlp_logits(tape, w, config, batch);
      break;
    case ModelKind::gru: {
      std::vector<NodeId> per_t = build_gru_logits(tape, w, config, batch);
      out.logits = batch.t_len == 1 ? per_t[0] : tape.concat(per_t);
      break;
    }
    case ModelKind::hmm: {
      std::vector<NodeId> per_t = build_hmm_logits(tape, w, config, batch);
      out.logits = batch.t_len == 1 ? per_t[0] : tape.concat(per_t);
      break;
    }
    case ModelKind::gruhmm: {
      BlockSlices blk(tape, w, config);
      const NodeId ones =
          tape.constant(std::vector<double>(static_cast<std::size_t>(batch.batch), 1.0));
      const NodeId gain = tape.linear(ones, blk("mix.gamma"), ad::kNoNode, 1, config.output_dim);
      std::vector<NodeId> hmm_t = build_hmm_logits(tape, w, config, batch);
      std::vector<NodeId> gru_t = build_gru_logits(tape, w, config, batch);
      std::vector<NodeId> mixed;
      mixed.reserve(hmm_t.size());
      for (std::size_t t = 0; t < hmm_t.size(); ++t)
        mixed.push_back(tape.add(hmm_t[t], tape.mul(gru_t[t], gain)));
      out.logits = mixed.size() == 1 ? mixed[0] : tape.concat(mixed);
      const NodeId gru_all = gru_t.size() == 1 ? gru_t[0] : tape.concat(gru_t);
      out.tree_view = tape.sigmoid(gru_all);
      break;
    }
  }
  out.probs = tape.sigmoid(out.logits);
  if (out.tree_view == ad::kNoNode) out.tree_view = out.probs;
  return out;
}

ad::NodeId build_bce(Tape& tape, const ForwardNodes& fwd, const SeqBatch& batch) {
  return tape.bce(fwd.probs, batch.y);
}

namespace {

struct LengthGroup {
  std::vector<int> members;    // sequence indices
  std::vector<int> positions;  // positions within the caller's index list
};

std::vector<LengthGroup> group_by_length(const SequenceDataset& data,
                                         const std::vector<int>& indices) {
  std::vector<int> lengths;
  std::vector<LengthGroup> groups;
  for (std::size_t pos = 0; pos < indices.size(); ++pos) {
    const int t = data.sequences[static_cast<std::size_t>(indices[pos])].x.rows;
    std::size_t g = 0;
    while (g < lengths.size() && lengths[g] != t) ++g;
    if (g == lengths.size()) {
      lengths.push_back(t);
      groups.emplace_back();
    }
    groups[g].members.push_back(indices[pos]);
    groups[g].positions.push_back(static_cast<int>(pos));
  }
  return groups;
}

}  // namespace

std::vector<Matrix> predict_dataset(const ParamVector& w, const ModelConfig& config,
                                    const SequenceDataset& data, const std::vector<int>& indices,
                                    bool tree_view) {
  std::vector<Matrix> out(indices.size());
  for (const LengthGroup& group : group_by_length(data, indices)) {
    const SeqBatch batch = pack_batch(data, group.members);
    Tape tape;
    const NodeId wc = tape.constant(w.values);
    const ForwardNodes fwd = build_forward(tape, wc, config, batch);
    const std::span<const double> vals = tape.value(tree_view ? fwd.tree_view : fwd.probs);
    for (std::size_t b = 0; b < group.members.size(); ++b) {
      Matrix m(batch.t_len, batch.output_dim);
      for (int t = 0; t < batch.t_len; ++t) {
        const std::size_t src =
            static_cast<std::size_t>(batch.row(static_cast<int>(b), t)) * batch.output_dim;
        std::copy_n(vals.begin() + static_cast<std::ptrdiff_t>(src), batch.output_dim,
                    m.row(t).begin());
      }
      out[static_cast<std::size_t>(group.positions[b])] = std::move(m);
    }
  }
  return out;
}

Matrix predict_rows(const ParamVector& w, const ModelConfig& config, const SequenceDataset& data,
                    const std::vector<int>& indices, bool tree_view) {
  const std::vector<Matrix> per_seq = predict_dataset(w, config, data, indices, tree_view);
  std::int64_t rows = 0;
  for (const Matrix& m : per_seq) rows += m.rows;
  Matrix out(static_cast<int>(rows), data.n_labels());
  int r = 0;
  for (const Matrix& m : per_seq)
    for (int t = 0; t < m.rows; ++t) {
      std::copy(m.row(t).begin(), m.row(t).end(), out.row(r).begin());
      ++r;
    }
  return out;
}

PredictionReplayer::PredictionReplayer(const ModelConfig& config, const SequenceDataset& data,
                                       std::vector<int> indices, bool tree_view) {
  std::vector<std::int64_t> row_offset(indices.size() + 1, 0);
  for (std::size_t i = 0; i < indices.size(); ++i)
    row_offset[i + 1] =
        row_offset[i] + data.sequences[static_cast<std::size_t>(indices[i])].x.rows;
  rows_ = Matrix(static_cast<int>(row_offset.back()), data.n_labels());

  std::int64_t param_size = 0;
  for (const BlockSpec& spec : param_layout(config)) param_size += spec.size();
  const std::vector<double> zeros(static_cast<std::size_t>(param_size), 0.0);

  for (const LengthGroup& group : group_by_length(data, indices)) {
    const SeqBatch batch = pack_batch(data, group.members);
    Group g;
    const NodeId p = g.tape.param(zeros);
    const ForwardNodes fwd = build_forward(g.tape, p, config, batch);
    g.probs = tree_view ? fwd.tree_view : fwd.probs;
    g.tape.mark_output(g.tape.sum(g.probs));  // replay needs a marked output
    g.dest_row.resize(static_cast<std::size_t>(batch.batch) * batch.t_len);
    for (int b = 0; b < batch.batch; ++b)
      for (int t = 0; t < batch.t_len; ++t)
        g.dest_row[static_cast<std::size_t>(batch.row(b, t))] =
            static_cast<int>(row_offset[static_cast<std::size_t>(group.positions[b])]) + t;
    groups_.push_back(std::move(g));
  }
}

const Matrix& PredictionReplayer::eval(std::span<const double> w_values) {
  for (Group& g : groups_) {
    g.tape.set_param(w_values);
    g.tape.replay();
    const std::span<const double> vals = g.tape.value(g.probs);
    const int l = rows_.cols;
    for (std::size_t slot = 0; slot < g.dest_row.size(); ++slot)
      std::copy_n(vals.begin() + static_cast<std::ptrdiff_t>(slot * static_cast<std::size_t>(l)),
                  l, rows_.row(g.dest_row[slot]).begin());
  }
  return rows_;
}

HmmParams hmm_params_from(const ParamVector& w, const ModelConfig& config) {
  config.validate();
  if (config.kind != ModelKind::hmm && config.kind != ModelKind::gruhmm)
    throw ContractError("hmm_params_from: model has no state-machine block");
  const int k = config.hmm_states, f = config.input_dim, l = config.output_dim;
  HmmParams p;
  p.pi = Matrix(1, k);
  p.a = Matrix(k, k);
  p.emission = Matrix(k, f);
  p.w_out = Matrix(l, k);
  p.b_out = Matrix(1, l);

  auto softmax_into = [](std::span<const double> logits, std::span<double> out) {
    const double m = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      out[i] = std::exp(logits[i] - m);
      total += out[i];
    }
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] /= total;
  };

  softmax_into(w.block("hmm.pi"), p.pi.row(0));
  const auto a_logits = w.block("hmm.a");
  for (int r = 0; r < k; ++r)
    softmax_into(a_logits.subspan(static_cast<std::size_t>(r) * k, static_cast<std::size_t>(k)),
                 p.a.row(r));
  const auto phi = w.block("hmm.phi");
  for (std::size_t i = 0; i < phi.size(); ++i)
    p.emission.data[i] = 1.0 / (1.0 + std::exp(-phi[i]));
  const auto wo = w.block("hmm.out.w");
  std::copy(wo.begin(), wo.end(), p.w_out.data.begin());
  const auto bo = w.block("hmm.out.b");
  std::copy(bo.begin(), bo.end(), p.b_out.data.begin());
  return p;
}

HmmFilterResult hmm_filter(const HmmParams& params, const Matrix& x) {
  const int k = params.a.rows;
  const int f = params.emission.cols;
  const int l = params.w_out.rows;
  if (params.pi.cols != k || params.a.cols != k || params.emission.rows != k ||
      params.w_out.cols != k || params.b_out.cols != l)
    throw ContractError("hmm_filter: parameter shapes are inconsistent");
  if (x.cols != f)
    throw ContractError("hmm_filter: input has " + std::to_string(x.cols) +
                        " features, emission table expects " + std::to_string(f));
  auto check_dist = [](std::span<const double> row, const char* what) {
    double total = 0.0;
    for (double v : row) {
      if (v < 0.0 || v > 1.0)
        throw ContractError(std::string("hmm_filter: ") + what + " entry outside [0, 1]");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw ContractError(std::string("hmm_filter: ") + what + " row does not sum to 1");
  };
  check_dist(params.pi.row(0), "initial distribution");
  for (int r = 0; r < k; ++r) check_dist(params.a.row(r), "transition");
  for (double e : params.emission.data)
    if (e < 0.0 || e > 1.0) throw ContractError("hmm_filter: emission probability outside [0, 1]");

  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  HmmFilterResult result;
  result.beliefs = Matrix(x.rows, k);
  result.probs = Matrix(x.rows, l);
  std::vector<double> alpha(static_cast<std::size_t>(k), 0.0);
  std::vector<double> next(static_cast<std::size_t>(k), 0.0);
  for (int t = 0; t < x.rows; ++t) {
    for (int s = 0; s < k; ++s) {
      double prior;
      if (t == 0) {
        prior = std::log(params.pi.at(0, s));
      } else {
        double m = kNegInf;
        for (int j = 0; j < k; ++j) {
          const double v = alpha[static_cast<std::size_t>(j)] + std::log(params.a.at(j, s));
          if (v > m) m = v;
        }
        if (m == kNegInf) {
          prior = kNegInf;
        } else {
          double total = 0.0;
          for (int j = 0; j < k; ++j)
            total += std::exp(alpha[static_cast<std::size_t>(j)] + std::log(params.a.at(j, s)) - m);
          prior = m + std::log(total);
        }
      }
      double loglik = 0.0;
      for (int d = 0; d < f; ++d) {
        const double xv = x.at(t, d);
        const double e = params.emission.at(s, d);
        if (xv != 0.0) loglik += xv * std::log(e);
        if (xv != 1.0) loglik += (1.0 - xv) * std::log1p(-e);
      }
      next[static_cast<std::size_t>(s)] = prior + loglik;
    }
    const double m = *std::max_element(next.begin(), next.end());
    if (m == kNegInf)
      throw NumericError("hmm filter: observation at t=" + std::to_string(t) +
                         " has zero likelihood under every state");
    double total = 0.0;
    for (double v : next) total += std::exp(v - m);
    const double lse = m + std::log(total);
    for (int s = 0; s < k; ++s) {
      alpha[static_cast<std::size_t>(s)] = next[static_cast<std::size_t>(s)] - lse;
      result.beliefs.at(t, s) = std::exp(alpha[static_cast<std::size_t>(s)]);
    }
    for (int o = 0; o < l; ++o) {
      double z = params.b_out.at(0, o);
      for (int s = 0; s < k; ++s) z += params.w_out.at(o, s) * result.beliefs.at(t, s);
      result.probs.at(t, o) = 1.0 / (1.0 + std::exp(-z));
    }
  }
  return result;
}

}  // namespace treereg
