#include <cmath>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "treereg/common.hpp"
#include "treereg/penalty.hpp"
#include "treereg/rng.hpp"

using namespace treereg;

namespace {

ParamVector vec2(double a, double b) {
  ParamVector w = ParamVector::create({{"w", {2}}});
  w.values = {a, b};
  return w;
}

// Gradient of Psi at w via the tape.
std::vector<double> penalty_grad(const ParamVector& w, const RegularizerSpec& spec,
                                 const ParamVector* xi = nullptr) {
  ad::Tape tape = ad::forward_record(
      w, [&](ad::Tape& t, ad::NodeId p) { return build_penalty(t, p, spec, xi); });
  return tape.backward();
}

}  // namespace

TEST_CASE("regularizer kinds: names round-trip and bad input is rejected") {
  for (RegKind kind :
       {RegKind::none, RegKind::l1, RegKind::l2, RegKind::elastic, RegKind::tree}) {
    CHECK(reg_kind_from(reg_kind_name(kind)) == kind);
  }
  CHECK_THROWS_AS(reg_kind_from("ridge"), DataError);
  CHECK_THROWS_WITH_AS(reg_kind_from(""), doctest::Contains("unknown regularizer kind"),
                       DataError);

  RegularizerSpec bad_lambda{RegKind::l2, -0.5, 0.5};
  CHECK_THROWS_AS(bad_lambda.validate(), ContractError);
  RegularizerSpec bad_alpha{RegKind::elastic, 1.0, 1.5};
  CHECK_THROWS_AS(bad_alpha.validate(), ContractError);
  RegularizerSpec nan_lambda{RegKind::l1, std::nan(""), 0.5};
  CHECK_THROWS_AS(nan_lambda.validate(), ContractError);
  ad::Tape tape;
  ad::NodeId w = tape.constant(std::vector<double>{1.0, 2.0});
  CHECK_THROWS_AS(build_penalty(tape, w, bad_alpha), ContractError);
}

TEST_CASE("penalty values: the pinned examples") {
  ParamVector zero = vec2(0.0, 0.0);
  ParamVector w = vec2(3.0, -4.0);

  // Zero weights cost nothing under every norm-based kind.
  for (RegKind kind : {RegKind::none, RegKind::l1, RegKind::l2, RegKind::elastic}) {
    RegularizerSpec spec{kind, 1.0, 0.3};
    CHECK(penalty_value(zero, spec) == 0.0);
  }

  CHECK(penalty_value(w, {RegKind::l1, 1.0, 0.5}) == 7.0);
  // The l2 penalty is the Euclidean norm itself, not the squared norm.
  CHECK(penalty_value(w, {RegKind::l2, 1.0, 0.5}) == 5.0);
  CHECK(penalty_value(w, {RegKind::none, 1.0, 0.5}) == 0.0);
  // alpha = 0.25: 0.25 * 7 + 0.75 * 5 = 5.5.
  CHECK(penalty_value(w, {RegKind::elastic, 1.0, 0.25}) == doctest::Approx(5.5).epsilon(1e-12));
  // The mix interpolates between the pure kinds at the endpoints.
  CHECK(penalty_value(w, {RegKind::elastic, 1.0, 1.0}) == doctest::Approx(7.0));
  CHECK(penalty_value(w, {RegKind::elastic, 1.0, 0.0}) == doctest::Approx(5.0));
}

TEST_CASE("penalty gradients: closed forms and the subgradient choices at zero") {
  ParamVector w = vec2(3.0, -4.0);

  std::vector<double> g1 = penalty_grad(w, {RegKind::l1, 1.0, 0.5});
  CHECK(g1[0] == doctest::Approx(1.0));
  CHECK(g1[1] == doctest::Approx(-1.0));

  std::vector<double> g2 = penalty_grad(w, {RegKind::l2, 1.0, 0.5});
  CHECK(g2[0] == doctest::Approx(0.6));   // w / ||w||
  CHECK(g2[1] == doctest::Approx(-0.8));

  std::vector<double> ge = penalty_grad(w, {RegKind::elastic, 1.0, 0.25});
  CHECK(ge[0] == doctest::Approx(0.25 * 1.0 + 0.75 * 0.6));
  CHECK(ge[1] == doctest::Approx(0.25 * -1.0 + 0.75 * -0.8));

  // Both subgradients are pinned to 0 at the origin, so elastic is too.
  ParamVector zero = vec2(0.0, 0.0);
  for (RegKind kind : {RegKind::l1, RegKind::l2, RegKind::elastic}) {
    std::vector<double> g0 = penalty_grad(zero, {kind, 1.0, 0.5});
    CHECK(g0[0] == 0.0);
    CHECK(g0[1] == 0.0);
  }

  std::vector<double> gn = penalty_grad(w, {RegKind::none, 1.0, 0.5});
  CHECK(gn[0] == 0.0);
  CHECK(gn[1] == 0.0);
}

TEST_CASE("penalty gradients: finite differences over random weights") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    Rng rng(900 + seed);
    ParamVector w = ParamVector::create({{"a", {3, 2}}, {"b", {3}}});
    for (double& v : w.values) v = rng.uniform(-2.0, 2.0);  // nonzero a.s.

    for (RegularizerSpec spec : {RegularizerSpec{RegKind::l1, 1.0, 0.5},
                                 RegularizerSpec{RegKind::l2, 1.0, 0.5},
                                 RegularizerSpec{RegKind::elastic, 1.0, 0.3}}) {
      CAPTURE(reg_kind_name(spec.kind));
      auto build = [&](ad::Tape& t, ad::NodeId p) { return build_penalty(t, p, spec); };
      ad::Tape tape = ad::forward_record(w, build);
      std::vector<double> grad = tape.backward();
      std::vector<double> fd = testutil::fd_gradient(w, build);
      CHECK(testutil::gradient_rel_err(grad, fd) < 1e-5);
    }
  }
}

TEST_CASE("tree penalty: routes through the fitted estimator") {
  ParamVector w = vec2(0.8, -0.3);
  auto omega = [](std::span<const double> v) { return std::abs(v[0]) + std::abs(v[1]); };

  SurrogateConfig cfg;
  cfg.hidden_units = 8;
  cfg.epochs = 600;
  cfg.learning_rate = 0.02;

  // Unfitted: both entry points refuse with the same condition.
  RegularizerSpec spec{RegKind::tree, 10.0, 0.5};
  {
    ad::Tape tape;
    ad::NodeId node = tape.constant(w.values);
    CHECK_THROWS_WITH_AS(build_penalty(tape, node, spec, nullptr),
                         doctest::Contains("surrogate not ready"), ContractError);
    SurrogateContext ctx(cfg, omega, 1);
    CHECK_THROWS_WITH_AS(build_penalty(tape, node, spec, ctx),
                         doctest::Contains("surrogate not ready"), ContractError);
  }

  std::vector<SurrogateSample> samples;
  Rng rng(7);
  for (int j = 0; j < 24; ++j) {
    SurrogateSample s;
    s.w_flat = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    s.omega_true = omega(s.w_flat);
    samples.push_back(s);
  }
  ParamVector xi = fit_surrogate(samples, cfg, 3);

  // The penalty node evaluates to exactly the estimator's prediction.
  double direct = surrogate_estimate(xi, w.values);
  CHECK(direct >= 0.0);
  CHECK(penalty_value(w, spec, &xi) == doctest::Approx(direct).epsilon(1e-15));

  auto build = [&](ad::Tape& t, ad::NodeId p) { return build_penalty(t, p, spec, &xi); };
  ad::Tape tape = ad::forward_record(w, build);
  std::vector<double> grad = tape.backward();
  std::vector<double> fd = testutil::fd_gradient(w, build);
  CHECK(testutil::gradient_rel_err(grad, fd) < 1e-5);
}
