#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "treereg/param_vector.hpp"

namespace treereg::ad {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

// Allocator with a fixed 64-byte alignment. Vectorized matrix kernels pick
// their load/store path from the runtime pointer alignment, so backing the
// tape's value storage with ordinary malloc'd memory would make results
// depend bitwise on heap history. Pinning the alignment keeps replays and
// gradients reproducible down to the last bit.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using AlignedDoubles = std::vector<double, AlignedAllocator<double>>;

// Reverse-mode tape over vector-valued nodes. Exactly one differentiable
// parameter leaf per tape; everything else enters as constants. Values are
// computed eagerly as nodes are recorded, checked finite, and can be replayed.
class Tape {
 public:
  Tape() = default;

  void reserve(std::size_t nodes_hint, std::size_t values_hint);

  // Leaves. param() may be called at most once per tape.
  NodeId param(std::span<const double> values);
  NodeId constant(std::span<const double> values);
  NodeId constant_scalar(double v);

  // Elementwise on equal-length nodes.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId max(NodeId a, NodeId b);

  // k * a + c elementwise with scalar constants.
  NodeId ax_plus_b(NodeId a, double k, double c);
  NodeId scale(NodeId a, double k) { return ax_plus_b(a, k, 0.0); }
  NodeId neg(NodeId a) { return ax_plus_b(a, -1.0, 0.0); }
  NodeId one_minus(NodeId a) { return ax_plus_b(a, -1.0, 1.0); }

  NodeId abs(NodeId a);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId log(NodeId a);
  NodeId exp(NodeId a);
  NodeId softplus(NodeId a);

  // Batched affine map: x is (rows x in) row-major, w is (out x in) row-major,
  // bias has length out (or kNoNode). Result is (rows x out) row-major.
  NodeId linear(NodeId x, NodeId w, NodeId bias, int in_dim, int out_dim);
  // Single affine map / matvec over a length-`cols` vector.
  NodeId affine(NodeId w, NodeId x, NodeId bias, int rows, int cols);
  NodeId matvec(NodeId w, NodeId x, int rows, int cols);

  NodeId sum(NodeId a);
  NodeId dot(NodeId a, NodeId b);
  NodeId norm2(NodeId a);          // Euclidean norm; gradient 0 at the origin
  NodeId logsumexp(NodeId a);      // whole vector -> scalar

  // Per-row log-softmax of an (rows x cols) row-major node.
  NodeId log_softmax_rows(NodeId a, int rows, int cols);

  // Log-space transition step, batched: v is (rows x r_dim), m is
  // (r_dim x c_dim); out[b,c] = logsumexp_r(v[b,r] + m[r,c]).
  NodeId lse_matvec(NodeId v, NodeId m, int r_dim, int c_dim);

  NodeId slice(NodeId a, int offset, int len);
  NodeId concat(std::span<const NodeId> parts);

  // Summed binary cross-entropy of probabilities vs {0,1} targets.
  // Probabilities are clamped to [1e-12, 1 - 1e-12]; clamp events counted.
  NodeId bce(NodeId yhat, std::span<const double> targets);

  int node_count() const { return static_cast<int>(nodes_.size()); }
  int value_len(NodeId id) const;
  std::span<const double> value(NodeId id) const;
  double scalar_value(NodeId id) const;

  void mark_output(NodeId id);
  NodeId output() const { return output_; }
  double output_value() const { return scalar_value(output_); }

  // Gradient of the scalar output with respect to the param leaf.
  std::vector<double> backward() const;

  // Recomputes every node from the recorded inputs; returns the output value.
  double replay();

  // Overwrites the param leaf's values (same length); combined with replay()
  // this re-evaluates the recorded computation at a new parameter vector.
  void set_param(std::span<const double> values);

  bool has_param() const { return param_node_ != kNoNode; }
  NodeId param_node() const { return param_node_; }
  std::uint64_t clamp_events() const { return clamp_events_; }

 private:
  enum class Op : std::uint8_t {
    kParam, kConst, kAdd, kSub, kMul, kMax, kAxPlusB, kAbs, kTanh, kSigmoid,
    kLog, kExp, kSoftplus, kLinear, kSum, kDot, kNorm2, kLogSumExp,
    kLogSoftmaxRows, kLseMatVec, kSlice, kConcat, kBce,
  };

  struct Node {
    Op op;
    bool requires_grad = false;
    NodeId a = kNoNode, b = kNoNode, c = kNoNode;
    std::int64_t val_off = 0;
    int len = 0;
    int aux0 = 0, aux1 = 0;      // dims / slice offset
    double k = 0.0, cst = 0.0;   // AxPlusB coefficients
    int extra_off = -1, extra_len = 0;  // int pool (concat) or double pool (bce)
  };

  static const char* op_name(Op op);

  NodeId push(Node n);
  void eval(Node& n);
  void check_finite(const Node& n, NodeId id) const;
  const double* vals(const Node& n) const { return values_.data() + n.val_off; }
  double* vals(const Node& n) { return values_.data() + n.val_off; }
  const Node& at(NodeId id, const char* ctx) const;
  NodeId unary(Op op, NodeId a);
  NodeId binary(Op op, NodeId a, NodeId b);

  std::vector<Node> nodes_;
  AlignedDoubles values_;
  std::vector<NodeId> int_pool_;
  std::vector<double> dbl_pool_;
  NodeId param_node_ = kNoNode;
  NodeId output_ = kNoNode;
  std::uint64_t clamp_events_ = 0;
};

// Records f(tape, param_leaf) -> output node over w's flat values.
template <typename F>
Tape forward_record(const ParamVector& w, F&& build) {
  Tape tape;
  NodeId p = tape.param(w.values);
  tape.mark_output(build(tape, p));
  return tape;
}

inline std::vector<double> backward(const Tape& tape) { return tape.backward(); }

}  // namespace treereg::ad
