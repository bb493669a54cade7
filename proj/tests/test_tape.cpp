#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "treereg/common.hpp"
#include "treereg/rng.hpp"
#include "treereg/tape.hpp"
#include "test_util.hpp"

using treereg::ContractError;
using treereg::NumericError;
using treereg::ParamVector;
using treereg::Rng;
namespace ad = treereg::ad;

namespace {

ParamVector make_params(int n, Rng& rng, double lo = -2.0, double hi = 2.0) {
  auto pv = ParamVector::create({{"w", {n}}});
  for (auto& v : pv.values) v = rng.uniform(lo, hi);
  return pv;
}

}  // namespace

TEST_CASE("tape: w^2 at w=3 gives value 9 and gradient 6") {
  auto w = ParamVector::create({{"w", {1}}});
  w.values[0] = 3.0;
  auto tape = ad::forward_record(w, [](ad::Tape& t, ad::NodeId p) { return t.dot(p, p); });
  CHECK(tape.output_value() == doctest::Approx(9.0).epsilon(1e-12));
  auto grad = ad::backward(tape);
  REQUIRE(grad.size() == 1);
  CHECK(grad[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("tape: sigmoid at 0 gives 0.5 with derivative 0.25") {
  auto w = ParamVector::create({{"w", {1}}});
  auto tape = ad::forward_record(w, [](ad::Tape& t, ad::NodeId p) { return t.sum(t.sigmoid(p)); });
  CHECK(tape.output_value() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(ad::backward(tape)[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("tape: two-layer network forward matches a straight-line evaluation") {
  // y = wo . tanh(W x + b), all parameters packed in one vector.
  const int in = 3, hid = 4;
  Rng rng(17);
  auto w = ParamVector::create({{"W", {hid, in}}, {"b", {hid}}, {"wo", {hid}}});
  for (auto& v : w.values) v = rng.uniform(-1.0, 1.0);
  std::vector<double> x = {0.3, -1.2, 0.7};

  auto build = [&](ad::Tape& t, ad::NodeId p) {
    ad::NodeId W = t.slice(p, 0, hid * in);
    ad::NodeId b = t.slice(p, hid * in, hid);
    ad::NodeId wo = t.slice(p, hid * in + hid, hid);
    ad::NodeId xin = t.constant(x);
    ad::NodeId h = t.tanh(t.affine(W, xin, b, hid, in));
    return t.dot(wo, h);
  };
  auto tape = ad::forward_record(w, build);

  // Independent evaluation with plain loops.
  double expect = 0.0;
  for (int j = 0; j < hid; ++j) {
    double pre = w.values[static_cast<std::size_t>(hid * in + j)];
    for (int i = 0; i < in; ++i)
      pre += w.values[static_cast<std::size_t>(j * in + i)] * x[static_cast<std::size_t>(i)];
    expect += w.values[static_cast<std::size_t>(hid * in + hid + j)] * std::tanh(pre);
  }
  CHECK(tape.output_value() == doctest::Approx(expect).epsilon(1e-12));

  double first = tape.output_value();
  CHECK(tape.replay() == first);

  auto grad = ad::backward(tape);
  auto fd = testutil::fd_gradient(w, build);
  CHECK(testutil::gradient_rel_err(grad, fd) < 1e-7);
}

TEST_CASE("tape: set_param then replay re-evaluates at the new parameters") {
  auto w = ParamVector::create({{"w", {3}}});
  w.values = {1.0, 2.0, 3.0};
  auto tape = ad::forward_record(w, [](ad::Tape& t, ad::NodeId p) { return t.dot(p, p); });
  CHECK(tape.output_value() == doctest::Approx(14.0).epsilon(1e-15));

  std::vector<double> shifted = {2.0, 0.0, -1.0};
  tape.set_param(shifted);
  CHECK(tape.replay() == doctest::Approx(5.0).epsilon(1e-15));
  // Gradient is taken at the updated point: d/dw (w.w) = 2w.
  auto grad = tape.backward();
  CHECK(grad[0] == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(grad[2] == doctest::Approx(-2.0).epsilon(1e-15));

  CHECK_THROWS_AS(tape.set_param(std::vector<double>{1.0}), ContractError);
  ad::Tape no_param;
  no_param.mark_output(no_param.constant_scalar(1.0));
  CHECK_THROWS_AS(no_param.set_param(shifted), ContractError);
}

TEST_CASE("tape: recording exp(exp(exp(1000))) raises a numeric overflow naming the node") {
  auto w = ParamVector::create({{"w", {1}}});
  w.values[0] = 1000.0;
  try {
    ad::forward_record(w, [](ad::Tape& t, ad::NodeId p) { return t.sum(t.exp(t.exp(t.exp(p)))); });
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    std::string msg = e.what();
    CHECK(msg.find("numeric overflow") != std::string::npos);
    CHECK(msg.find("node") != std::string::npos);
    CHECK(msg.find("exp") != std::string::npos);
  }
}

TEST_CASE("tape: backward on a non-scalar output is a contract violation") {
  auto w = ParamVector::create({{"w", {3}}});
  auto tape = ad::forward_record(w, [](ad::Tape&, ad::NodeId p) { return p; });
  CHECK_THROWS_AS((void)tape.backward(), ContractError);
}

TEST_CASE("tape: only one parameter leaf per tape") {
  auto w = ParamVector::create({{"w", {2}}});
  ad::Tape t;
  (void)t.param(w.values);
  CHECK_THROWS_AS((void)t.param(w.values), ContractError);
}

TEST_CASE("tape: bce clamps exact 0/1 probabilities and counts the event") {
  auto w = ParamVector::create({{"w", {1}}});
  w.values[0] = 1000.0;  // sigmoid saturates to exactly 1.0
  std::vector<double> y = {0.0};
  auto tape = ad::forward_record(
      w, [&](ad::Tape& t, ad::NodeId p) { return t.bce(t.sigmoid(p), y); });
  CHECK(tape.clamp_events() > 0);
  CHECK(std::isfinite(tape.output_value()));
}

// Every primitive against central finite differences, 100 seeds each.
TEST_CASE("tape: gradients of all primitives match finite differences") {
  const double tol = 1e-5;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed * 7919 + 13);
    const int n = 6;

    struct NamedCase {
      const char* name;
      std::function<ad::NodeId(ad::Tape&, ad::NodeId)> build;
      ParamVector w;
    };
    std::vector<NamedCase> cases;

    std::vector<double> cvec(n), cvec2(n);
    for (auto& v : cvec) v = rng.uniform(-1.5, 1.5);
    for (auto& v : cvec2) v = rng.uniform(-1.5, 1.5);

    auto probe = [&](double lo, double hi) {
      Rng r2 = rng.derive(seed + 1000);
      return make_params(n, r2, lo, hi);
    };

    cases.push_back({"add", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.add(p, t.constant(cvec)), t.constant(cvec2));
    }, probe(-2, 2)});
    cases.push_back({"sub", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.sub(t.constant(cvec), p), t.constant(cvec2));
    }, probe(-2, 2)});
    cases.push_back({"mul", [&](ad::Tape& t, ad::NodeId p) {
      return t.sum(t.mul(p, t.mul(p, t.constant(cvec))));
    }, probe(-2, 2)});
    cases.push_back({"max", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.max(p, t.constant(cvec)), t.constant(cvec2));
    }, probe(-2, 2)});
    cases.push_back({"ax_plus_b", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.ax_plus_b(p, -1.7, 0.4), t.constant(cvec));
    }, probe(-2, 2)});
    cases.push_back({"abs", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.abs(p), t.constant(cvec));
    }, probe(0.2, 2.0)});
    cases.push_back({"tanh", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.tanh(p), t.constant(cvec));
    }, probe(-2, 2)});
    cases.push_back({"sigmoid", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.sigmoid(p), t.constant(cvec));
    }, probe(-2, 2)});
    cases.push_back({"log", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.log(p), t.constant(cvec));
    }, probe(0.5, 3.0)});
    cases.push_back({"exp", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.exp(p), t.constant(cvec));
    }, probe(-1.5, 1.5)});
    cases.push_back({"softplus", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.softplus(p), t.constant(cvec));
    }, probe(-2, 2)});
    cases.push_back({"linear as weights", [&](ad::Tape& t, ad::NodeId p) {
      // p supplies a 2x2 weight block and a length-2 bias.
      ad::NodeId W = t.slice(p, 0, 4);
      ad::NodeId b = t.slice(p, 4, 2);
      std::vector<double> x = {cvec[0], cvec[1], cvec[2], cvec[3]};  // two rows
      ad::NodeId y = t.linear(t.constant(x), W, b, 2, 2);
      return t.dot(y, t.constant(std::vector<double>{cvec2[0], cvec2[1], cvec2[2], cvec2[3]}));
    }, probe(-2, 2)});
    cases.push_back({"linear as input", [&](ad::Tape& t, ad::NodeId p) {
      ad::NodeId y = t.linear(p, t.constant(std::vector<double>{cvec.begin(), cvec.end()}),
                              ad::kNoNode, 3, 2);
      return t.sum(t.mul(y, y));
    }, probe(-2, 2)});
    cases.push_back({"sum", [&](ad::Tape& t, ad::NodeId p) {
      return t.sum(t.mul(p, p));
    }, probe(-2, 2)});
    cases.push_back({"dot self", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(p, p);
    }, probe(-2, 2)});
    cases.push_back({"norm2", [&](ad::Tape& t, ad::NodeId p) {
      return t.norm2(p);
    }, probe(0.3, 2.0)});
    cases.push_back({"logsumexp", [&](ad::Tape& t, ad::NodeId p) {
      return t.logsumexp(p);
    }, probe(-2, 2)});
    cases.push_back({"log_softmax_rows", [&](ad::Tape& t, ad::NodeId p) {
      return t.dot(t.log_softmax_rows(p, 2, 3), t.constant(cvec));
    }, probe(-2, 2)});
    cases.push_back({"lse_matvec", [&](ad::Tape& t, ad::NodeId p) {
      // rows of p: first 2 entries act as v, last 4 as a 2x2 matrix.
      ad::NodeId v = t.slice(p, 0, 2);
      ad::NodeId m = t.slice(p, 2, 4);
      return t.dot(t.lse_matvec(v, m, 2, 2), t.constant(std::vector<double>{cvec[0], cvec[1]}));
    }, probe(-2, 2)});
    cases.push_back({"slice+concat", [&](ad::Tape& t, ad::NodeId p) {
      ad::NodeId a = t.slice(p, 0, 2);
      ad::NodeId b = t.slice(p, 3, 3);
      std::vector<ad::NodeId> parts = {b, a};
      return t.dot(t.concat(parts), t.constant(std::vector<double>{cvec[0], cvec[1], cvec[2],
                                                                   cvec[3], cvec[4]}));
    }, probe(-2, 2)});
    cases.push_back({"bce", [&](ad::Tape& t, ad::NodeId p) {
      std::vector<double> targets(n);
      Rng tr(seed + 5);
      for (auto& v : targets) v = tr.bernoulli(0.5) ? 1.0 : 0.0;
      return t.bce(t.sigmoid(p), targets);
    }, probe(-2, 2)});

    for (auto& c : cases) {
      auto tape = ad::forward_record(c.w, c.build);
      auto grad = ad::backward(tape);
      auto fd = testutil::fd_gradient(c.w, c.build);
      double err = testutil::gradient_rel_err(grad, fd);
      INFO("primitive ", c.name, " seed ", seed, " rel err ", err);
      CHECK(err < tol);
    }
  }
}
