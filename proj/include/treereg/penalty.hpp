#pragma once

#include <string>

#include "treereg/param_vector.hpp"
#include "treereg/surrogate.hpp"
#include "treereg/tape.hpp"

namespace treereg {

enum class RegKind { none, l1, l2, elastic, tree };

const char* reg_kind_name(RegKind kind);
RegKind reg_kind_from(const std::string& name);

struct RegularizerSpec {
  RegKind kind = RegKind::none;
  double lambda = 0.0;
  double alpha = 0.5;  // elastic mix: alpha * l1 + (1 - alpha) * l2

  void validate() const;
};

// Appends the raw penalty Psi(w) to the tape (lambda is applied by the
// objective, not here): none -> 0; l1 -> sum |w_i|; l2 -> ||w||_2 (the
// Euclidean norm, not its square); elastic -> the alpha mix of the two;
// tree -> the fitted estimator's prediction at w, with gradients flowing
// through the frozen estimator.
ad::NodeId build_penalty(ad::Tape& tape, ad::NodeId w, const RegularizerSpec& spec,
                         const ParamVector* xi = nullptr);

// Same, pulling xi from the training-time context. Tree kind before the first
// fit raises "surrogate not ready".
ad::NodeId build_penalty(ad::Tape& tape, ad::NodeId w, const RegularizerSpec& spec,
                         const SurrogateContext& surrogate);

// Psi(w) as a plain number, evaluated on a throwaway tape.
double penalty_value(const ParamVector& w, const RegularizerSpec& spec,
                     const ParamVector* xi = nullptr);

}  // namespace treereg
