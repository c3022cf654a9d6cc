#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "smac/autodiff.hpp"
#include "smac/rng.hpp"
#include "support/oracles.hpp"

using smac::ad::Tape;
using smac::ad::Var;

TEST_CASE("analytic forward values", "[autodiff]") {
  Tape t;
  Var x = t.leaf_scalar(3.0);
  CHECK(t.value_scalar(t.square(x)) == 9.0);

  Var neg = t.leaf_scalar(-1.0);
  CHECK(t.value_scalar(t.relu(neg)) == 0.0);

  Var y = t.leaf_scalar(0.7);
  CHECK(t.value_scalar(t.log(t.exp(y))) == Catch::Approx(0.7).margin(1e-15));
}

TEST_CASE("backward of square", "[autodiff]") {
  Tape t;
  Var x = t.leaf_scalar(3.0);
  Var r = t.square(x);
  t.backward(r);
  CHECK(t.grad(x)[0] == Catch::Approx(6.0));
}

TEST_CASE("clip gradient rule through mean", "[autodiff]") {
  Tape t;
  const std::vector<double> xs = {0.5, 2.0};
  Var x = t.leaf(1, 2, xs);
  Var r = t.mean(t.clip(x, -1.0, 1.0));
  t.backward(r);
  CHECK(t.grad(x)[0] == 0.5);
  CHECK(t.grad(x)[1] == 0.0);
}

TEST_CASE("clip gradient is zero exactly at the bounds", "[autodiff]") {
  Tape t;
  const std::vector<double> xs = {-1.0, 1.0, 0.999999};
  Var x = t.leaf(1, 3, xs);
  Var r = t.sum(t.clip(x, -1.0, 1.0));
  t.backward(r);
  CHECK(t.grad(x)[0] == 0.0);
  CHECK(t.grad(x)[1] == 0.0);
  CHECK(t.grad(x)[2] == 1.0);
}

TEST_CASE("detached paths carry exactly zero gradient", "[autodiff]") {
  Tape t;
  const std::vector<double> xs = {0.3, -0.7, 1.2};
  Var x = t.leaf(1, 3, xs);
  Var y = t.leaf(1, 3, xs);
  // loss = sum(x * detach(x) + y): d/dx should see only the live factor.
  Var r = t.sum(t.add(t.mul(x, t.detach(x)), y));
  t.backward(r);
  for (int i = 0; i < 3; ++i) {
    CHECK(t.grad(x)[i] == xs[static_cast<std::size_t>(i)]);
    CHECK(t.grad(y)[i] == 1.0);
  }

  Tape t2;
  Var a = t2.leaf(1, 3, xs);
  Var r2 = t2.sum(t2.square(t2.detach(a)));
  t2.backward(r2);
  for (int i = 0; i < 3; ++i) CHECK(t2.grad(a)[i] == 0.0);
}

namespace {

// Dense composite expression over 10 inputs; exercises every
// differentiable op away from clip/relu/min kinks. (detach has its own
// test: finite differences cannot see stop-gradient semantics.)
Var composite(Tape& t, const std::vector<double>& v, std::vector<Var>* leaves = nullptr) {
  Var a = t.leaf(2, 2, std::span<const double>(v.data(), 4));
  Var b = t.leaf(2, 2, std::span<const double>(v.data() + 4, 4));
  Var c = t.leaf(1, 2, std::span<const double>(v.data() + 8, 2));
  if (leaves) *leaves = {a, b, c};

  Var mm = t.matmul(a, b);
  Var h = t.add_row(mm, c);
  Var s = t.tanh(h);
  Var e = t.exp(t.scale(s, 0.3));
  Var l = t.log(t.add(e, t.scale(e, 2.0)));
  Var q = t.square(t.sub(l, s));
  Var m1 = t.cmin(q, t.mul(s, s));
  Var m2 = t.cmax(m1, t.scale(q, 0.5));
  Var d = t.div(m2, t.add(e, e));
  Var cc = t.concat_cols(d, q);
  Var sl = t.cols(cc, 1, 3);
  Var cl = t.clip(sl, -0.8, 0.9);
  return t.add(t.mean(cl), t.scale(t.sum(q), 0.01));
}

}  // namespace

TEST_CASE("composite expression matches central finite differences", "[autodiff]") {
  smac::Rng rng(12345);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> v(10);
    for (double& x : v) x = rng.uniform(-0.9, 0.9);

    Tape t;
    std::vector<Var> leaves;
    Var root = composite(t, v, &leaves);
    t.backward(root);

    std::vector<double> got;
    for (Var p : leaves) {
      auto g = t.grad(p);
      got.insert(got.end(), g.begin(), g.end());
    }

    Tape scratch;
    auto f = [&](const std::vector<double>& x) {
      scratch.reset();
      return scratch.value_scalar(composite(scratch, x));
    };
    const auto want = oracle::central_diff(f, v, 1e-6);
    INFO("trial " << trial);
    CHECK(oracle::grad_close(got, want, 1e-4, 1e-6));
  }
}

TEST_CASE("relu and elementwise ops match finite differences", "[autodiff]") {
  smac::Rng rng(99);
  std::vector<double> v(6);
  for (double& x : v) {
    do {
      x = rng.uniform(-2.0, 2.0);
    } while (std::abs(x) < 0.05);  // stay away from the relu kink
  }
  Tape t;
  Var x = t.leaf(2, 3, v);
  Var root = t.mean(t.mul(t.relu(x), t.exp(t.scale(x, 0.5))));
  t.backward(root);

  Tape scratch;
  auto f = [&](const std::vector<double>& in) {
    scratch.reset();
    Var xx = scratch.leaf(2, 3, in);
    return scratch.value_scalar(
        scratch.mean(scratch.mul(scratch.relu(xx), scratch.exp(scratch.scale(xx, 0.5)))));
  };
  const auto want = oracle::central_diff(f, v, 1e-6);
  CHECK(oracle::grad_close(t.grad(x), want, 1e-4, 1e-8));
}

TEST_CASE("identical expression is bit-identical across evaluations", "[autodiff]") {
  auto run = [](std::vector<double>& vals, std::vector<double>& grads) {
    Tape t;
    std::vector<double> v = {0.11, -0.52, 0.73, 1.9};
    Var x = t.leaf(2, 2, v);
    Var root = t.mean(t.tanh(t.matmul(x, x)));
    t.backward(root);
    auto val = t.value(root);
    vals.assign(val.begin(), val.end());
    auto g = t.grad(x);
    grads.assign(g.begin(), g.end());
  };
  std::vector<double> v1, g1, v2, g2;
  run(v1, g1);
  run(v2, g2);
  CHECK(v1 == v2);
  CHECK(g1 == g2);
}

TEST_CASE("error paths", "[autodiff]") {
  Tape t;
  Var a = t.leaf(2, 2, std::vector<double>{1, 2, 3, 4});
  Var b = t.leaf(1, 2, std::vector<double>{1, 2});
  CHECK_THROWS_AS(t.add(a, b), smac::DimensionError);
  CHECK_THROWS_AS(t.matmul(b, b), smac::DimensionError);

  Var neg = t.leaf_scalar(-1.0);
  CHECK_THROWS_AS(t.log(neg), smac::NumericError);

  CHECK_THROWS_AS(t.backward(a), smac::ContractError);

  std::vector<double> bad = {std::nan("")};
  CHECK_THROWS_AS(t.leaf(1, 1, bad), smac::NumericError);
}

TEST_CASE("tape reuse after reset", "[autodiff]") {
  Tape t;
  for (int i = 0; i < 3; ++i) {
    t.reset();
    Var x = t.leaf_scalar(2.0 + i);
    Var r = t.square(x);
    t.backward(r);
    CHECK(t.grad(x)[0] == Catch::Approx(2.0 * (2.0 + i)));
  }
}
