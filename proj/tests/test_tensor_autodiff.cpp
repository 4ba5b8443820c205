// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "foldlab/errors.hpp"
#include "foldlab/grad_check.hpp"
#include "foldlab/tape.hpp"
#include "test_util.hpp"

using namespace foldlab;
using foldlab::testing::random_tensor;

namespace {

// Reduces any tensor-valued expression to a scalar with fixed random weights
// so every output element contributes a distinct gradient.
Var weighted_sum(Tape& t, Var x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return t.sum(t.mul(x, t.constant(random_tensor(t.value(x).shape(), rng))));
}

double check(const LossBuilder& f, std::vector<GradCheckParam> params, double h = 1e-5) {
  return grad_check(f, params, h).max_rel_error;
}

}  // namespace

TEST_CASE("tensor shape contract") {
  CHECK(Tensor().shape() == Shape{1});
  CHECK(Tensor({2, 3}).numel() == 6);
  CHECK_THROWS_AS(Tensor(Shape{}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 3}).reshaped({4}), ShapeError);
  CHECK(Tensor({2, 3}, 1.5).reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(Tensor::from({1, 2}).item(), ShapeError);
}

TEST_CASE("forward values of simple cases") {
  Tape t;
  const Tensor& sm = t.value(t.softmax(t.constant(Tensor::from({0.0, 0.0}))));
  CHECK(sm[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(sm[1] == doctest::Approx(0.5).epsilon(1e-15));

  const Tensor& mm = t.value(t.matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({3, 4}, 1.0))));
  CHECK(mm.shape() == Shape{2, 4});
  for (double v : mm.data()) CHECK(v == 0.0);

  // Uniform logits over 64 symbols cost ln 64 per token.
  const std::vector<int> targets = {3, 17, 63, 0, 41};
  const double ce = t.value(t.cross_entropy(t.constant(Tensor({5, 64})), targets)).item();
  CHECK(ce == doctest::Approx(std::log(64.0)).epsilon(1e-14));
  CHECK(std::log(64.0) == doctest::Approx(4.1589).epsilon(1e-4));
}

TEST_CASE("causal mask blocks future positions") {
  Tape t;
  std::mt19937_64 rng(1);
  const Tensor& p = t.value(t.softmax(t.causal_mask(t.constant(random_tensor({2, 4, 4}, rng)))));
  for (std::size_t m = 0; m < 2; ++m) {
    for (std::size_t i = 0; i < 4; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        const double v = p[(m * 4 + i) * 4 + j];
        if (j > i) CHECK(v == 0.0);
        row += v;
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-14));
    }
  }
}

TEST_CASE("hand gradients") {
  Tape t;
  const Tensor w = Tensor::from({1.0, -2.0});
  const Tensor p = Tensor::from({5.0});
  const Var wv = t.parameter("w", w);
  t.parameter("p", p);
  const GradMap g = t.backward(t.sum(t.mul(wv, wv)));
  CHECK(g.at("w")[0] == 2.0);
  CHECK(g.at("w")[1] == -4.0);
  // A parameter the loss ignores gets an exact zero, not a missing entry.
  REQUIRE(g.count("p") == 1);
  CHECK(g.at("p")[0] == 0.0);
}

TEST_CASE("tape ids increase and names are unique") {
  Tape t;
  const Tensor a = Tensor::from({1.0});
  const Var x = t.parameter("a", a);
  const Var y = t.scale(x, 2.0);
  const Var z = t.add(y, x);
  CHECK(x.id < y.id);
  CHECK(y.id < z.id);
  CHECK(t.size() == 3);
  CHECK_THROWS(t.parameter("a", a));
  CHECK_THROWS_AS(t.backward(t.constant(Tensor({2}))), ShapeError);
}

TEST_CASE("finite-difference step for a quadratic") {
  const Tensor init = Tensor::from({0.3, -1.2, 2.5});
  for (double h : {1e-6, 1e-5, 1e-4}) {
    Tensor w = init;
    auto f = [&](Tape& t) {
      const Var v = t.parameter("w", w);
      return t.sum(t.mul(v, v));
    };
    CHECK(check(f, {{"w", &w}}, h) <= 1e-8);
  }
}

TEST_CASE("every primitive matches central differences") {
  std::mt19937_64 rng(2024);
  constexpr double kTol = 1e-6;

  SUBCASE("matmul with leading axes") {
    Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({4, 5}, rng);
    auto f = [&](Tape& t) { return weighted_sum(t, t.matmul(t.parameter("a", a), t.parameter("b", b))); };
    CHECK(check(f, {{"a", &a}, {"b", &b}}) <= kTol);
  }
  SUBCASE("batched matmul, both layouts") {
    Tensor a = random_tensor({3, 2, 4}, rng), b = random_tensor({3, 4, 5}, rng), c = random_tensor({3, 5, 4}, rng);
    auto f = [&](Tape& t) {
      const Var av = t.parameter("a", a);
      return t.add(weighted_sum(t, t.bmm(av, t.parameter("b", b), false)),
                   weighted_sum(t, t.bmm(av, t.parameter("c", c), true), 5));
    };
    CHECK(check(f, {{"a", &a}, {"b", &b}, {"c", &c}}) <= kTol);
  }
  SUBCASE("broadcast add and mul") {
    Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({4}, rng), c = random_tensor({3, 4}, rng);
    auto f = [&](Tape& t) {
      const Var av = t.parameter("a", a);
      return weighted_sum(t, t.mul(t.add(av, t.parameter("b", b)), t.parameter("c", c)));
    };
    CHECK(check(f, {{"a", &a}, {"b", &b}, {"c", &c}}) <= kTol);
  }
  SUBCASE("constant and scalar-tensor scaling") {
    Tensor a = random_tensor({3, 4}, rng), s = Tensor::from({0.7});
    auto f = [&](Tape& t) {
      return weighted_sum(t, t.scale_by(t.scale(t.parameter("a", a), -1.3), t.parameter("s", s)));
    };
    CHECK(check(f, {{"a", &a}, {"s", &s}}) <= kTol);
  }
  SUBCASE("masked softmax") {
    Tensor a = random_tensor({2, 5, 5}, rng);
    auto f = [&](Tape& t) { return weighted_sum(t, t.softmax(t.causal_mask(t.parameter("a", a)))); };
    CHECK(check(f, {{"a", &a}}) <= kTol);
  }
  SUBCASE("rms norm") {
    Tensor x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng);
    auto f = [&](Tape& t) { return weighted_sum(t, t.rms_norm(t.parameter("x", x), t.parameter("g", g))); };
    CHECK(check(f, {{"x", &x}, {"g", &g}}) <= kTol);
  }
  SUBCASE("gelu") {
    Tensor x = random_tensor({4, 7}, rng, 2.0);
    auto f = [&](Tape& t) { return weighted_sum(t, t.gelu(t.parameter("x", x))); };
    CHECK(check(f, {{"x", &x}}) <= kTol);
  }
  SUBCASE("embedding with repeated ids") {
    Tensor table = random_tensor({5, 3}, rng);
    const std::vector<int> ids = {0, 4, 4, 2, 0, 1};
    auto f = [&](Tape& t) { return weighted_sum(t, t.embedding(t.parameter("e", table), ids, {2, 3})); };
    CHECK(check(f, {{"e", &table}}) <= kTol);
  }
  SUBCASE("softmax cross-entropy composite") {
    Tensor logits = random_tensor({2, 3, 6}, rng);
    const std::vector<int> targets = {0, 5, 2, 2, 1, 3};
    auto f = [&](Tape& t) { return t.cross_entropy(t.parameter("z", logits), targets); };
    CHECK(check(f, {{"z", &logits}}) <= kTol);
  }
  SUBCASE("reshape, head transpose and slicing") {
    Tensor a = random_tensor({2, 3, 8}, rng);
    auto f = [&](Tape& t) {
      const Var four = t.reshape(t.slice_last(t.parameter("a", a), 2, 4), {2, 3, 2, 2});
      return weighted_sum(t, t.transpose12(four));
    };
    CHECK(check(f, {{"a", &a}}) <= kTol);
  }
  SUBCASE("gate") {
    Tensor a = random_tensor({6}, rng);
    auto f = [&](Tape& t) { return weighted_sum(t, t.gate(t.parameter("a", a), 0.05)); };
    CHECK(check(f, {{"a", &a}}) <= kTol);
  }
  SUBCASE("kl divergence against a constant target") {
    Tensor target({2, 4});
    Tape tmp;
    target = tmp.value(tmp.softmax(tmp.constant(random_tensor({2, 4}, rng))));
    Tensor z = random_tensor({2, 4}, rng);
    auto f = [&](Tape& t) { return t.kl_div(target, t.softmax(t.parameter("z", z))); };
    CHECK(check(f, {{"z", &z}}) <= kTol);
  }
}

TEST_CASE("grad check reports non-finite losses") {
  Tensor w = Tensor::from({1.0});
  auto f = [&](Tape& t) {
    const Var v = t.parameter("w", w);
    return t.sum(t.scale(v, std::numeric_limits<double>::infinity()));
  };
  const std::vector<GradCheckParam> p = {{"w", &w}};
  CHECK_THROWS_AS(grad_check(f, p, 1e-5), NumericalError);
}

TEST_CASE("gate closed forms") {
  for (double eps : {0.1, 0.01, 1e-3}) {
    CHECK(gate_value(0.0, eps) == 0.0);
    CHECK(gate_derivative(0.0, eps) == 0.0);
    CHECK(std::abs(gate_value(std::sqrt(eps), eps) - 0.5) <= 1e-12);
    CHECK(std::abs(gate_value(1.0, eps) - 1.0 / (1.0 + eps)) <= 1e-12);
  }
  CHECK(gate_value(1.0, 0.1) == doctest::Approx(0.9090909).epsilon(1e-7));
  CHECK(gate_derivative(std::sqrt(0.1), 0.1) == doctest::Approx(1.0 / (2.0 * std::sqrt(0.1))).epsilon(1e-12));
  CHECK(gate_derivative(std::sqrt(0.1), 0.1) == doctest::Approx(1.5811).epsilon(1e-4));
}

TEST_CASE("gate derivative against central differences on a grid") {
  double worst = 0.0;
  for (double eps : {0.1, 0.01, 1e-3}) {
    for (int i = 0; i <= 600; ++i) {
      const double x = -3.0 + 0.01 * i;
      // Step scaled to the curvature scale sqrt(eps): small enough for the
      // truncation term, large enough that roundoff stays below the tail
      // derivative at |x| = 3.
      const double h = 1e-4 * std::sqrt(eps);
      const double fd = (gate_value(x + h, eps) - gate_value(x - h, eps)) / (2 * h);
      const double an = gate_derivative(x, eps);
      worst = std::max(worst, std::abs(an - fd) / std::max(std::abs(fd), 1e-8));
    }
  }
  CHECK(worst <= 1e-6);
  // Finite-difference value at the half-open point.
  const double h = 1e-6, x = 0.5, eps = 0.1;
  const double fd = (gate_value(x + h, eps) - gate_value(x - h, eps)) / (2 * h);
  CHECK(std::abs(gate_derivative(x, eps) - fd) <= 1e-6);
}

TEST_CASE("printed gate derivative differs from the analytic one") {
  // 2 x eps / (x^2 + eps), without the square in the denominator.
  CHECK(gate_derivative_printed(1.0, 0.1) == doctest::Approx(2.0 * 0.1 / 1.1).epsilon(1e-14));
  CHECK(gate_derivative_printed(1.0, 0.1) != doctest::Approx(gate_derivative(1.0, 0.1)));
  Tape t;
  const Tensor a = Tensor::from({1.0});
  const GradMap g = t.backward(t.sum(t.gate(t.parameter("a", a), 0.1, GateGradient::Printed)));
  CHECK(g.at("a")[0] == doctest::Approx(gate_derivative_printed(1.0, 0.1)).epsilon(1e-14));
}

TEST_CASE("kl divergence hand case") {
  const Tensor target({2, 2}, std::vector<double>{0.9, 0.1, 0.9, 0.1});
  const Tensor pred({2, 2}, std::vector<double>{0.5, 0.5, 0.5, 0.5});
  const double expected = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  CHECK(std::abs(kl_divergence_rows(target, pred) - expected) <= 1e-12);
  CHECK(std::abs(kl_divergence_rows(target, pred) - 0.3681) <= 1e-4);
  CHECK(kl_divergence_rows(target, target) == 0.0);
  // Zero-probability target entries contribute nothing.
  const Tensor onehot({1, 2}, std::vector<double>{1.0, 0.0});
  const Tensor q({1, 2}, std::vector<double>{0.25, 0.75});
  CHECK(kl_divergence_rows(onehot, q) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("shape mismatches are rejected") {
  Tape t;
  const Var a = t.constant(Tensor({2, 3}));
  CHECK_THROWS_AS(t.matmul(a, t.constant(Tensor({2, 3}))), ShapeError);
  CHECK_THROWS_AS(t.add(a, t.constant(Tensor({2}))), ShapeError);
  CHECK_THROWS_AS(t.rms_norm(a, t.constant(Tensor({2}))), ShapeError);
  CHECK_THROWS_AS(t.cross_entropy(a, std::vector<int>{0}), ShapeError);
  CHECK_THROWS(t.cross_entropy(a, std::vector<int>{0, 3}));
  CHECK_THROWS_AS(t.slice_last(a, 2, 2), ShapeError);
}
