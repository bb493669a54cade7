#include "treereg/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include <Eigen/Dense>

#include "treereg/common.hpp"

namespace treereg::ad {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

constexpr double kBceClamp = 1e-12;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace

const char* Tape::op_name(Op op) {
  switch (op) {
    case Op::kParam: return "param";
    case Op::kConst: return "const";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMax: return "max";
    case Op::kAxPlusB: return "ax_plus_b";
    case Op::kAbs: return "abs";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kSoftplus: return "softplus";
    case Op::kLinear: return "linear";
    case Op::kSum: return "sum";
    case Op::kDot: return "dot";
    case Op::kNorm2: return "norm2";
    case Op::kLogSumExp: return "logsumexp";
    case Op::kLogSoftmaxRows: return "log_softmax_rows";
    case Op::kLseMatVec: return "lse_matvec";
    case Op::kSlice: return "slice";
    case Op::kConcat: return "concat";
    case Op::kBce: return "bce";
  }
  return "?";
}

void Tape::reserve(std::size_t nodes_hint, std::size_t values_hint) {
  nodes_.reserve(nodes_hint);
  values_.reserve(values_hint);
}

const Tape::Node& Tape::at(NodeId id, const char* ctx) const {
  if (id < 0 || id >= node_count())
    throw ContractError(std::string(ctx) + ": invalid node id " + std::to_string(id));
  return nodes_[static_cast<std::size_t>(id)];
}

int Tape::value_len(NodeId id) const { return at(id, "value_len").len; }

std::span<const double> Tape::value(NodeId id) const {
  const Node& n = at(id, "value");
  return {values_.data() + n.val_off, static_cast<std::size_t>(n.len)};
}

double Tape::scalar_value(NodeId id) const {
  const Node& n = at(id, "scalar_value");
  if (n.len != 1)
    throw ContractError("scalar_value: node " + std::to_string(id) + " has length " +
                        std::to_string(n.len));
  return values_[static_cast<std::size_t>(n.val_off)];
}

NodeId Tape::push(Node n) {
  n.val_off = static_cast<std::int64_t>(values_.size());
  values_.resize(values_.size() + static_cast<std::size_t>(n.len));
  nodes_.push_back(n);
  NodeId id = static_cast<NodeId>(nodes_.size() - 1);
  eval(nodes_.back());
  check_finite(nodes_.back(), id);
  return id;
}

void Tape::check_finite(const Node& n, NodeId id) const {
  const double* v = vals(n);
  for (int i = 0; i < n.len; ++i) {
    if (!std::isfinite(v[i]))
      throw NumericError("numeric overflow: non-finite value in node " + std::to_string(id) +
                         " (" + op_name(n.op) + ")");
  }
}

NodeId Tape::param(std::span<const double> values) {
  if (param_node_ != kNoNode) throw ContractError("param: tape already has a parameter leaf");
  Node n;
  n.op = Op::kParam;
  n.requires_grad = true;
  n.len = static_cast<int>(values.size());
  n.extra_off = static_cast<int>(dbl_pool_.size());
  n.extra_len = n.len;
  dbl_pool_.insert(dbl_pool_.end(), values.begin(), values.end());
  NodeId id = push(n);
  param_node_ = id;
  return id;
}

NodeId Tape::constant(std::span<const double> values) {
  Node n;
  n.op = Op::kConst;
  n.len = static_cast<int>(values.size());
  n.extra_off = static_cast<int>(dbl_pool_.size());
  n.extra_len = n.len;
  dbl_pool_.insert(dbl_pool_.end(), values.begin(), values.end());
  return push(n);
}

NodeId Tape::constant_scalar(double v) { return constant(std::span<const double>(&v, 1)); }

NodeId Tape::unary(Op op, NodeId a) {
  const Node& na = at(a, op_name(op));
  Node n;
  n.op = op;
  n.a = a;
  n.len = na.len;
  n.requires_grad = na.requires_grad;
  return push(n);
}

NodeId Tape::binary(Op op, NodeId a, NodeId b) {
  const Node& na = at(a, op_name(op));
  const Node& nb = at(b, op_name(op));
  if (na.len != nb.len)
    throw ContractError(std::string(op_name(op)) + ": length mismatch " +
                        std::to_string(na.len) + " vs " + std::to_string(nb.len));
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.len = na.len;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(n);
}

NodeId Tape::add(NodeId a, NodeId b) { return binary(Op::kAdd, a, b); }
NodeId Tape::sub(NodeId a, NodeId b) { return binary(Op::kSub, a, b); }
NodeId Tape::mul(NodeId a, NodeId b) { return binary(Op::kMul, a, b); }
NodeId Tape::max(NodeId a, NodeId b) { return binary(Op::kMax, a, b); }

NodeId Tape::ax_plus_b(NodeId a, double k, double c) {
  const Node& na = at(a, "ax_plus_b");
  Node n;
  n.op = Op::kAxPlusB;
  n.a = a;
  n.len = na.len;
  n.k = k;
  n.cst = c;
  n.requires_grad = na.requires_grad;
  return push(n);
}

NodeId Tape::abs(NodeId a) { return unary(Op::kAbs, a); }
NodeId Tape::tanh(NodeId a) { return unary(Op::kTanh, a); }
NodeId Tape::sigmoid(NodeId a) { return unary(Op::kSigmoid, a); }
NodeId Tape::log(NodeId a) { return unary(Op::kLog, a); }
NodeId Tape::exp(NodeId a) { return unary(Op::kExp, a); }
NodeId Tape::softplus(NodeId a) { return unary(Op::kSoftplus, a); }

NodeId Tape::linear(NodeId x, NodeId w, NodeId bias, int in_dim, int out_dim) {
  const Node& nx = at(x, "linear");
  const Node& nw = at(w, "linear");
  if (in_dim <= 0 || out_dim <= 0) throw ContractError("linear: non-positive dims");
  if (nx.len % in_dim != 0)
    throw ContractError("linear: x length " + std::to_string(nx.len) +
                        " not a multiple of in_dim " + std::to_string(in_dim));
  if (nw.len != in_dim * out_dim)
    throw ContractError("linear: weight length " + std::to_string(nw.len) + " != " +
                        std::to_string(in_dim) + "*" + std::to_string(out_dim));
  bool rg = nx.requires_grad || nw.requires_grad;
  if (bias != kNoNode) {
    const Node& nb = at(bias, "linear");
    if (nb.len != out_dim) throw ContractError("linear: bias length != out_dim");
    rg = rg || nb.requires_grad;
  }
  Node n;
  n.op = Op::kLinear;
  n.a = x;
  n.b = w;
  n.c = bias;
  n.aux0 = in_dim;
  n.aux1 = out_dim;
  n.len = (nx.len / in_dim) * out_dim;
  n.requires_grad = rg;
  return push(n);
}

NodeId Tape::affine(NodeId w, NodeId x, NodeId bias, int rows, int cols) {
  return linear(x, w, bias, cols, rows);
}

NodeId Tape::matvec(NodeId w, NodeId x, int rows, int cols) {
  return linear(x, w, kNoNode, cols, rows);
}

NodeId Tape::sum(NodeId a) {
  Node n;
  n.op = Op::kSum;
  n.a = a;
  n.len = 1;
  n.requires_grad = at(a, "sum").requires_grad;
  return push(n);
}

NodeId Tape::dot(NodeId a, NodeId b) {
  const Node& na = at(a, "dot");
  const Node& nb = at(b, "dot");
  if (na.len != nb.len) throw ContractError("dot: length mismatch");
  Node n;
  n.op = Op::kDot;
  n.a = a;
  n.b = b;
  n.len = 1;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(n);
}

NodeId Tape::norm2(NodeId a) {
  Node n;
  n.op = Op::kNorm2;
  n.a = a;
  n.len = 1;
  n.requires_grad = at(a, "norm2").requires_grad;
  return push(n);
}

NodeId Tape::logsumexp(NodeId a) {
  Node n;
  n.op = Op::kLogSumExp;
  n.a = a;
  n.len = 1;
  n.requires_grad = at(a, "logsumexp").requires_grad;
  return push(n);
}

NodeId Tape::log_softmax_rows(NodeId a, int rows, int cols) {
  const Node& na = at(a, "log_softmax_rows");
  if (rows <= 0 || cols <= 0 || na.len != rows * cols)
    throw ContractError("log_softmax_rows: bad dims");
  Node n;
  n.op = Op::kLogSoftmaxRows;
  n.a = a;
  n.len = na.len;
  n.aux0 = rows;
  n.aux1 = cols;
  n.requires_grad = na.requires_grad;
  return push(n);
}

NodeId Tape::lse_matvec(NodeId v, NodeId m, int r_dim, int c_dim) {
  const Node& nv = at(v, "lse_matvec");
  const Node& nm = at(m, "lse_matvec");
  if (r_dim <= 0 || c_dim <= 0) throw ContractError("lse_matvec: non-positive dims");
  if (nv.len % r_dim != 0) throw ContractError("lse_matvec: v length not a multiple of r_dim");
  if (nm.len != r_dim * c_dim) throw ContractError("lse_matvec: matrix length != r_dim*c_dim");
  Node n;
  n.op = Op::kLseMatVec;
  n.a = v;
  n.b = m;
  n.aux0 = r_dim;
  n.aux1 = c_dim;
  n.len = (nv.len / r_dim) * c_dim;
  n.requires_grad = nv.requires_grad || nm.requires_grad;
  return push(n);
}

NodeId Tape::slice(NodeId a, int offset, int len) {
  const Node& na = at(a, "slice");
  if (offset < 0 || len <= 0 || offset + len > na.len)
    throw ContractError("slice: range [" + std::to_string(offset) + ", " +
                        std::to_string(offset + len) + ") outside node of length " +
                        std::to_string(na.len));
  Node n;
  n.op = Op::kSlice;
  n.a = a;
  n.len = len;
  n.aux0 = offset;
  n.requires_grad = na.requires_grad;
  return push(n);
}

NodeId Tape::concat(std::span<const NodeId> parts) {
  if (parts.empty()) throw ContractError("concat: no parts");
  Node n;
  n.op = Op::kConcat;
  n.extra_off = static_cast<int>(int_pool_.size());
  n.extra_len = static_cast<int>(parts.size());
  int total = 0;
  for (NodeId p : parts) {
    const Node& np = at(p, "concat");
    total += np.len;
    n.requires_grad = n.requires_grad || np.requires_grad;
    int_pool_.push_back(p);
  }
  n.len = total;
  return push(n);
}

NodeId Tape::bce(NodeId yhat, std::span<const double> targets) {
  const Node& ny = at(yhat, "bce");
  if (static_cast<int>(targets.size()) != ny.len)
    throw ContractError("bce: target length mismatch");
  for (double t : targets)
    if (t != 0.0 && t != 1.0) throw ContractError("bce: targets must be 0 or 1");
  Node n;
  n.op = Op::kBce;
  n.a = yhat;
  n.len = 1;
  n.extra_off = static_cast<int>(dbl_pool_.size());
  n.extra_len = static_cast<int>(targets.size());
  dbl_pool_.insert(dbl_pool_.end(), targets.begin(), targets.end());
  n.requires_grad = ny.requires_grad;
  return push(n);
}

void Tape::eval(Node& n) {
  double* out = vals(n);
  const double* a = n.a != kNoNode ? vals(nodes_[static_cast<std::size_t>(n.a)]) : nullptr;
  const double* b = n.b != kNoNode ? vals(nodes_[static_cast<std::size_t>(n.b)]) : nullptr;
  switch (n.op) {
    case Op::kParam:
    case Op::kConst:
      std::memcpy(out, dbl_pool_.data() + n.extra_off, sizeof(double) * n.len);
      break;
    case Op::kAdd:
      for (int i = 0; i < n.len; ++i) out[i] = a[i] + b[i];
      break;
    case Op::kSub:
      for (int i = 0; i < n.len; ++i) out[i] = a[i] - b[i];
      break;
    case Op::kMul:
      for (int i = 0; i < n.len; ++i) out[i] = a[i] * b[i];
      break;
    case Op::kMax:
      for (int i = 0; i < n.len; ++i) out[i] = a[i] >= b[i] ? a[i] : b[i];
      break;
    case Op::kAxPlusB:
      for (int i = 0; i < n.len; ++i) out[i] = n.k * a[i] + n.cst;
      break;
    case Op::kAbs:
      for (int i = 0; i < n.len; ++i) out[i] = std::abs(a[i]);
      break;
    case Op::kTanh:
      for (int i = 0; i < n.len; ++i) out[i] = std::tanh(a[i]);
      break;
    case Op::kSigmoid:
      for (int i = 0; i < n.len; ++i) out[i] = stable_sigmoid(a[i]);
      break;
    case Op::kLog:
      for (int i = 0; i < n.len; ++i) out[i] = std::log(a[i]);
      break;
    case Op::kExp:
      for (int i = 0; i < n.len; ++i) out[i] = std::exp(a[i]);
      break;
    case Op::kSoftplus:
      for (int i = 0; i < n.len; ++i) out[i] = stable_softplus(a[i]);
      break;
    case Op::kLinear: {
      int in = n.aux0, o = n.aux1;
      int rows = n.len / o;
      ConstMatMap X(a, rows, in);
      ConstMatMap W(b, o, in);
      MatMap Y(out, rows, o);
      Y.noalias() = X * W.transpose();
      if (n.c != kNoNode) {
        ConstVecMap bias(vals(nodes_[static_cast<std::size_t>(n.c)]), o);
        Y.rowwise() += bias.transpose();
      }
      break;
    }
    case Op::kSum: {
      int alen = nodes_[static_cast<std::size_t>(n.a)].len;
      double s = 0.0;
      for (int i = 0; i < alen; ++i) s += a[i];
      out[0] = s;
      break;
    }
    case Op::kDot: {
      int alen = nodes_[static_cast<std::size_t>(n.a)].len;
      double s = 0.0;
      for (int i = 0; i < alen; ++i) s += a[i] * b[i];
      out[0] = s;
      break;
    }
    case Op::kNorm2: {
      int alen = nodes_[static_cast<std::size_t>(n.a)].len;
      double s = 0.0;
      for (int i = 0; i < alen; ++i) s += a[i] * a[i];
      out[0] = std::sqrt(s);
      break;
    }
    case Op::kLogSumExp: {
      int alen = nodes_[static_cast<std::size_t>(n.a)].len;
      double m = a[0];
      for (int i = 1; i < alen; ++i) m = std::max(m, a[i]);
      double s = 0.0;
      for (int i = 0; i < alen; ++i) s += std::exp(a[i] - m);
      out[0] = m + std::log(s);
      break;
    }
    case Op::kLogSoftmaxRows: {
      int rows = n.aux0, cols = n.aux1;
      for (int r = 0; r < rows; ++r) {
        const double* row = a + static_cast<std::ptrdiff_t>(r) * cols;
        double m = row[0];
        for (int c = 1; c < cols; ++c) m = std::max(m, row[c]);
        double s = 0.0;
        for (int c = 0; c < cols; ++c) s += std::exp(row[c] - m);
        double lse = m + std::log(s);
        double* orow = out + static_cast<std::ptrdiff_t>(r) * cols;
        for (int c = 0; c < cols; ++c) orow[c] = row[c] - lse;
      }
      break;
    }
    case Op::kLseMatVec: {
      int rd = n.aux0, cd = n.aux1;
      int batch = n.len / cd;
      for (int bi = 0; bi < batch; ++bi) {
        const double* v = a + static_cast<std::ptrdiff_t>(bi) * rd;
        double* orow = out + static_cast<std::ptrdiff_t>(bi) * cd;
        for (int c = 0; c < cd; ++c) {
          double m = -std::numeric_limits<double>::infinity();
          for (int r = 0; r < rd; ++r) m = std::max(m, v[r] + b[r * cd + c]);
          double s = 0.0;
          for (int r = 0; r < rd; ++r) s += std::exp(v[r] + b[r * cd + c] - m);
          orow[c] = m + std::log(s);
        }
      }
      break;
    }
    case Op::kSlice:
      std::memcpy(out, a + n.aux0, sizeof(double) * n.len);
      break;
    case Op::kConcat: {
      double* dst = out;
      for (int i = 0; i < n.extra_len; ++i) {
        const Node& part = nodes_[static_cast<std::size_t>(int_pool_[n.extra_off + i])];
        std::memcpy(dst, vals(part), sizeof(double) * part.len);
        dst += part.len;
      }
      break;
    }
    case Op::kBce: {
      int alen = nodes_[static_cast<std::size_t>(n.a)].len;
      const double* y = dbl_pool_.data() + n.extra_off;
      double loss = 0.0;
      for (int i = 0; i < alen; ++i) {
        double p = a[i];
        if (p < kBceClamp || p > 1.0 - kBceClamp) {
          p = std::clamp(p, kBceClamp, 1.0 - kBceClamp);
          if (clamp_events_ == 0)
            warn("bce: prediction outside (0,1) clamped to [1e-12, 1-1e-12]");
          ++clamp_events_;
        }
        loss += y[i] == 1.0 ? -std::log(p) : -std::log1p(-p);
      }
      out[0] = loss;
      break;
    }
  }
}

double Tape::replay() {
  if (output_ == kNoNode) throw ContractError("replay: no output marked");
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    eval(nodes_[i]);
    check_finite(nodes_[i], static_cast<NodeId>(i));
  }
  return output_value();
}

void Tape::set_param(std::span<const double> values) {
  if (param_node_ == kNoNode) throw ContractError("set_param: tape has no param leaf");
  Node& n = nodes_[static_cast<std::size_t>(param_node_)];
  if (static_cast<int>(values.size()) != n.len)
    throw ContractError("set_param: got " + std::to_string(values.size()) + " values, param has " +
                        std::to_string(n.len));
  // Leaf evaluation copies from the pool, so update both the pooled source and
  // the live value slot.
  std::copy(values.begin(), values.end(), dbl_pool_.begin() + n.extra_off);
  std::copy(values.begin(), values.end(), vals(n));
}

void Tape::mark_output(NodeId id) {
  at(id, "mark_output");
  output_ = id;
}

std::vector<double> Tape::backward() const {
  if (output_ == kNoNode) throw ContractError("backward: no output marked");
  const Node& out_node = nodes_[static_cast<std::size_t>(output_)];
  if (out_node.len != 1)
    throw ContractError("backward: output node has length " + std::to_string(out_node.len) +
                        ", expected a scalar");
  if (param_node_ == kNoNode) throw ContractError("backward: tape has no parameter leaf");

  AlignedDoubles adj(values_.size(), 0.0);
  adj[static_cast<std::size_t>(out_node.val_off)] = 1.0;

  for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.op == Op::kParam || n.op == Op::kConst) continue;
    const double* g = adj.data() + n.val_off;
    const Node* na = n.a != kNoNode ? &nodes_[static_cast<std::size_t>(n.a)] : nullptr;
    const Node* nb = n.b != kNoNode ? &nodes_[static_cast<std::size_t>(n.b)] : nullptr;
    double* da = na && na->requires_grad ? adj.data() + na->val_off : nullptr;
    double* db = nb && nb->requires_grad ? adj.data() + nb->val_off : nullptr;
    const double* a = na ? vals(*na) : nullptr;
    const double* b = nb ? vals(*nb) : nullptr;
    const double* v = vals(n);

    switch (n.op) {
      case Op::kParam:
      case Op::kConst:
        break;
      case Op::kAdd:
        if (da) for (int i = 0; i < n.len; ++i) da[i] += g[i];
        if (db) for (int i = 0; i < n.len; ++i) db[i] += g[i];
        break;
      case Op::kSub:
        if (da) for (int i = 0; i < n.len; ++i) da[i] += g[i];
        if (db) for (int i = 0; i < n.len; ++i) db[i] -= g[i];
        break;
      case Op::kMul:
        if (da) for (int i = 0; i < n.len; ++i) da[i] += g[i] * b[i];
        if (db) for (int i = 0; i < n.len; ++i) db[i] += g[i] * a[i];
        break;
      case Op::kMax:
        for (int i = 0; i < n.len; ++i) {
          if (a[i] >= b[i]) {
            if (da) da[i] += g[i];
          } else if (db) {
            db[i] += g[i];
          }
        }
        break;
      case Op::kAxPlusB:
        if (da) for (int i = 0; i < n.len; ++i) da[i] += n.k * g[i];
        break;
      case Op::kAbs:
        if (da)
          for (int i = 0; i < n.len; ++i)
            da[i] += a[i] > 0.0 ? g[i] : (a[i] < 0.0 ? -g[i] : 0.0);
        break;
      case Op::kTanh:
        if (da) for (int i = 0; i < n.len; ++i) da[i] += g[i] * (1.0 - v[i] * v[i]);
        break;
      case Op::kSigmoid:
        if (da) for (int i = 0; i < n.len; ++i) da[i] += g[i] * v[i] * (1.0 - v[i]);
        break;
      case Op::kLog:
        if (da) for (int i = 0; i < n.len; ++i) da[i] += g[i] / a[i];
        break;
      case Op::kExp:
        if (da) for (int i = 0; i < n.len; ++i) da[i] += g[i] * v[i];
        break;
      case Op::kSoftplus:
        if (da) for (int i = 0; i < n.len; ++i) da[i] += g[i] * stable_sigmoid(a[i]);
        break;
      case Op::kLinear: {
        int in = n.aux0, o = n.aux1;
        int rows = n.len / o;
        ConstMatMap G(g, rows, o);
        if (da) {
          MatMap dX(da, rows, in);
          ConstMatMap W(b, o, in);
          dX.noalias() += G * W;
        }
        if (db) {
          MatMap dW(db, o, in);
          ConstMatMap X(a, rows, in);
          dW.noalias() += G.transpose() * X;
        }
        if (n.c != kNoNode) {
          const Node& nc = nodes_[static_cast<std::size_t>(n.c)];
          if (nc.requires_grad) {
            VecMap dB(adj.data() + nc.val_off, o);
            dB.noalias() += G.colwise().sum().transpose();
          }
        }
        break;
      }
      case Op::kSum:
        if (da) for (int i = 0; i < na->len; ++i) da[i] += g[0];
        break;
      case Op::kDot:
        if (da) for (int i = 0; i < na->len; ++i) da[i] += g[0] * b[i];
        if (db) for (int i = 0; i < na->len; ++i) db[i] += g[0] * a[i];
        break;
      case Op::kNorm2:
        if (da && v[0] > 0.0)
          for (int i = 0; i < na->len; ++i) da[i] += g[0] * a[i] / v[0];
        break;
      case Op::kLogSumExp:
        if (da) for (int i = 0; i < na->len; ++i) da[i] += g[0] * std::exp(a[i] - v[0]);
        break;
      case Op::kLogSoftmaxRows: {
        if (!da) break;
        int rows = n.aux0, cols = n.aux1;
        for (int r = 0; r < rows; ++r) {
          const double* grow = g + static_cast<std::ptrdiff_t>(r) * cols;
          const double* vrow = v + static_cast<std::ptrdiff_t>(r) * cols;
          double* darow = da + static_cast<std::ptrdiff_t>(r) * cols;
          double gsum = 0.0;
          for (int c = 0; c < cols; ++c) gsum += grow[c];
          for (int c = 0; c < cols; ++c) darow[c] += grow[c] - std::exp(vrow[c]) * gsum;
        }
        break;
      }
      case Op::kLseMatVec: {
        int rd = n.aux0, cd = n.aux1;
        int batch = n.len / cd;
        for (int bi = 0; bi < batch; ++bi) {
          const double* vin = a + static_cast<std::ptrdiff_t>(bi) * rd;
          const double* orow = v + static_cast<std::ptrdiff_t>(bi) * cd;
          const double* grow = g + static_cast<std::ptrdiff_t>(bi) * cd;
          double* darow = da ? da + static_cast<std::ptrdiff_t>(bi) * rd : nullptr;
          for (int c = 0; c < cd; ++c) {
            if (grow[c] == 0.0) continue;
            for (int r = 0; r < rd; ++r) {
              double w = std::exp(vin[r] + b[r * cd + c] - orow[c]);
              if (darow) darow[r] += grow[c] * w;
              if (db) db[r * cd + c] += grow[c] * w;
            }
          }
        }
        break;
      }
      case Op::kSlice:
        if (da) for (int i = 0; i < n.len; ++i) da[n.aux0 + i] += g[i];
        break;
      case Op::kConcat: {
        const double* gp = g;
        for (int i = 0; i < n.extra_len; ++i) {
          const Node& part = nodes_[static_cast<std::size_t>(int_pool_[n.extra_off + i])];
          if (part.requires_grad) {
            double* dp = adj.data() + part.val_off;
            for (int j = 0; j < part.len; ++j) dp[j] += gp[j];
          }
          gp += part.len;
        }
        break;
      }
      case Op::kBce: {
        if (!da) break;
        const double* y = dbl_pool_.data() + n.extra_off;
        for (int i = 0; i < na->len; ++i) {
          double p = a[i];
          if (p < kBceClamp || p > 1.0 - kBceClamp) continue;  // clamped: flat
          da[i] += g[0] * (p - y[i]) / (p * (1.0 - p));
        }
        break;
      }
    }
  }

  const Node& pn = nodes_[static_cast<std::size_t>(param_node_)];
  return {adj.begin() + pn.val_off, adj.begin() + pn.val_off + pn.len};
}

}  // namespace treereg::ad
