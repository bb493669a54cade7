#include "treereg/penalty.hpp"

#include "treereg/common.hpp"

namespace treereg {

const char* reg_kind_name(RegKind kind) {
  switch (kind) {
    case RegKind::none: return "none";
    case RegKind::l1: return "l1";
    case RegKind::l2: return "l2";
    case RegKind::elastic: return "elastic";
    case RegKind::tree: return "tree";
  }
  throw ContractError("reg_kind_name: unhandled kind");
}

RegKind reg_kind_from(const std::string& name) {
  if (name == "none") return RegKind::none;
  if (name == "l1") return RegKind::l1;
  if (name == "l2") return RegKind::l2;
  if (name == "elastic") return RegKind::elastic;
  if (name == "tree") return RegKind::tree;
  throw DataError("unknown regularizer kind \"" + name +
                  "\"; expected none, l1, l2, elastic, or tree");
}

void RegularizerSpec::validate() const {
  if (!(lambda >= 0.0))
    throw ContractError("regularizer: lambda must be >= 0, got " + std::to_string(lambda));
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ContractError("regularizer: elastic mix alpha must lie in [0, 1], got " +
                        std::to_string(alpha));
}

ad::NodeId build_penalty(ad::Tape& tape, ad::NodeId w, const RegularizerSpec& spec,
                         const ParamVector* xi) {
  spec.validate();
  switch (spec.kind) {
    case RegKind::none:
      return tape.constant_scalar(0.0);
    case RegKind::l1:
      return tape.sum(tape.abs(w));
    case RegKind::l2:
      return tape.norm2(w);
    case RegKind::elastic: {
      ad::NodeId l1 = tape.sum(tape.abs(w));
      ad::NodeId l2 = tape.norm2(w);
      return tape.add(tape.scale(l1, spec.alpha), tape.scale(l2, 1.0 - spec.alpha));
    }
    case RegKind::tree:
      if (xi == nullptr)
        throw ContractError("surrogate not ready: tree regularizer needs a fitted estimator");
      return surrogate_penalty(tape, w, *xi);
  }
  throw ContractError("build_penalty: unhandled kind");
}

ad::NodeId build_penalty(ad::Tape& tape, ad::NodeId w, const RegularizerSpec& spec,
                         const SurrogateContext& surrogate) {
  if (spec.kind != RegKind::tree) return build_penalty(tape, w, spec, nullptr);
  return build_penalty(tape, w, spec, &surrogate.xi());  // xi() enforces readiness
}

double penalty_value(const ParamVector& w, const RegularizerSpec& spec, const ParamVector* xi) {
  ad::Tape tape;
  ad::NodeId node = tape.constant(w.values);
  return tape.scalar_value(build_penalty(tape, node, spec, xi));
}

}  // namespace treereg
