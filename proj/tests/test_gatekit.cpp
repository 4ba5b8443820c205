// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "foldlab/errors.hpp"
#include "foldlab/gates.hpp"
#include "foldlab/profiler.hpp"
#include "foldlab/tape.hpp"
#include "test_util.hpp"

using namespace foldlab;
using namespace foldlab::testing;

namespace {

// Multiply-adds counted one matmul at a time (2 FLOPs each).
double counted_attention_flops(std::size_t s, std::size_t d) {
  double f = 0;
  f += 2.0 * s * d * (3 * d);  // QKV projection
  f += 2.0 * s * s * d;        // Q K^T over all heads
  f += 2.0 * s * s * d;        // probs V
  f += 2.0 * s * d * d;        // output projection
  return f;
}

double counted_ffn_flops(std::size_t s, std::size_t d, std::size_t d_ff) {
  return 2.0 * s * d * d_ff + 2.0 * s * d_ff * d;
}

GateTrainConfig short_run(std::size_t steps, std::optional<double> lambda, std::uint64_t seed = 1) {
  GateTrainConfig g;
  g.steps = steps;
  g.lambda_resource = lambda;
  g.batch_size = 2;
  g.seed = seed;
  return g;
}

}  // namespace

TEST_CASE("eps schedule") {
  const GateSchedule s;
  CHECK(s.eps_at(0) == 0.1);
  CHECK(s.eps_at(119) == 0.1);
  CHECK(s.eps_at(120) == doctest::Approx(0.097).epsilon(1e-15));
  CHECK(s.eps_at(1000) == doctest::Approx(0.1 * std::pow(0.97, 8)).epsilon(1e-14));
  for (std::size_t t = 0; t < 100000; t += 997) CHECK(s.eps_at(t) > 0.0);
  CHECK_NOTHROW(s.validate());
  GateSchedule bad = s;
  bad.eps0 = 0.0;
  CHECK_THROWS(bad.validate());
  bad = s;
  bad.decay = 1.5;
  CHECK_THROWS(bad.validate());
  bad = s;
  bad.interval = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("gate set starts at the requested opening") {
  const GateSet g = GateSet::init(3, GateSchedule{}, 0.95);
  CHECK(g.alpha.shape() == Shape{3, 2});
  for (double v : g.values()) {
    CHECK(std::abs(v - 0.95) <= 1e-12);
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
  CHECK(g.gate(2, 1) == doctest::Approx(0.95).epsilon(1e-12));
  CHECK_THROWS(GateSet::init(3, GateSchedule{}, 1.0));
  CHECK_THROWS(GateSet::init(3, GateSchedule{}, 0.0));
}

TEST_CASE("block flops") {
  ModelConfig c = tiny_config(2, 8, 2, 32, 11, 4);
  const BlockFlops f = flops_of_block(c);
  CHECK(f.s_ffn == 4096.0);
  CHECK(f.s_att == 2560.0);
  CHECK(f.s_att == counted_attention_flops(4, 8));
  CHECK(f.s_ffn == counted_ffn_flops(4, 8, 32));
  CHECK(f.total() == 6656.0);

  const BlockFlops f2 = flops_of_block(c, 8);
  CHECK(f2.s_ffn == 2 * f.s_ffn);
  // Projection term doubles; the s^2 score term quadruples.
  CHECK(f2.s_att - 8.0 * 8 * 64 == 4 * (f.s_att - 8.0 * 4 * 64));
  CHECK(flops_of_block(c, 0).s_att == f.s_att);

  CHECK(block_score(1.0, 0.0, f) == doctest::Approx(2560.0 / 6656.0).epsilon(1e-15));
  CHECK(block_score(0.3, 0.3, f) == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("removal plan orders by score") {
  const std::vector<double> scores = {0.98, 0.01, 0.95, 0.03};
  const std::vector<std::size_t> uniform = {10, 10, 10, 10};
  const RemovalReport r = plan_removal(scores, uniform, 0.5, "gate");
  CHECK(r.removed == std::vector<std::size_t>{1, 3});
  CHECK(r.ranking == std::vector<std::size_t>{1, 3, 2, 0});
  CHECK(r.realized_ratio == 0.5);
  CHECK(r.requested_ratio == 0.5);
  CHECK(r.method == "gate");

  CHECK(plan_removal(scores, uniform, 0.0, "gate").removed.empty());
  CHECK(plan_removal(scores, uniform, 0.3, "gate").realized_ratio == 0.5);
  CHECK(plan_removal(scores, uniform, 0.75, "gate").removed == std::vector<std::size_t>{1, 2, 3});
  // Every block but one removed still falls short.
  CHECK_THROWS(plan_removal(scores, uniform, 0.8, "gate"));
  CHECK_THROWS(plan_removal(scores, uniform, 1.0, "gate"));
  CHECK_THROWS(plan_removal(scores, uniform, -0.1, "gate"));
  CHECK_THROWS(plan_removal(scores, std::vector<std::size_t>{1, 2}, 0.5, "gate"));
}

TEST_CASE("removal plan properties on random inputs") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> size(1, 50);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 10;
    std::vector<double> scores(n);
    std::vector<std::size_t> params(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = (trial % 3 == 0) ? std::floor(u(rng) * 3) : u(rng);
      params[i] = size(rng);
    }
    const double ratio = 0.6 * u(rng);
    const double total = std::accumulate(params.begin(), params.end(), 0.0);
    RemovalReport r;
    try {
      r = plan_removal(scores, params, ratio, "x");
    } catch (const std::invalid_argument&) {
      // Only when removing all but the largest-score block still misses.
      double rest = 0;
      for (std::size_t i = 0; i + 1 < n; ++i) rest += params[rank_ascending(scores)[i]];
      CHECK(rest / total < ratio);
      continue;
    }
    // Removed blocks are exactly a prefix of the ranking.
    std::vector<std::size_t> prefix(r.ranking.begin(), r.ranking.begin() + r.removed.size());
    std::sort(prefix.begin(), prefix.end());
    CHECK(prefix == r.removed);
    double removed = 0;
    for (auto i : r.removed) removed += params[i];
    CHECK(r.realized_ratio == doctest::Approx(removed / total).epsilon(1e-15));
    CHECK(r.realized_ratio >= ratio);
    // One block fewer would not reach the request.
    if (!r.removed.empty()) CHECK((removed - params[r.ranking[r.removed.size() - 1]]) / total < ratio);
  }
}

TEST_CASE("gate training basics") {
  const ModelConfig c = tiny_config(3, 8, 2, 32, 11, 8);
  const Model m = loud_model(c, 5);
  const std::vector<int> corpus = random_tokens(400, c.vocab_size, 8);

  SUBCASE("zero steps reports the initialization") {
    const GateTrainResult r = train_gates(m, corpus, short_run(0, std::nullopt));
    REQUIRE(r.trajectory.gates.size() == 1);
    const GateSet init = GateSet::init(3, GateSchedule{}, 0.95);
    CHECK(r.gates.alpha == init.alpha);
    for (double g : r.trajectory.gates[0]) CHECK(std::abs(g - 0.95) <= 1e-12);
  }
  SUBCASE("auto lambda balances the penalty against the task loss") {
    const GateTrainResult r = train_gates(m, corpus, short_run(3, std::nullopt));
    CHECK(r.lambda_resource > 0.0);
    CHECK(r.trajectory.penalty[0] == doctest::Approx(r.trajectory.task_loss[0]).epsilon(1e-12));
    CHECK(r.trajectory.eps.size() == 4);
  }
  SUBCASE("no pressure keeps gates near their start") {
    const GateTrainResult r = train_gates(m, corpus, short_run(30, 0.0));
    CHECK(r.lambda_resource == 0.0);
    for (double g : r.gates.values()) CHECK(g > 0.85);
    for (double p : r.trajectory.penalty) CHECK(p == 0.0);
  }
  SUBCASE("identical seeds give identical trajectories") {
    const GateTrainResult a = train_gates(m, corpus, short_run(10, 1e-4, 3));
    const GateTrainResult b = train_gates(m, corpus, short_run(10, 1e-4, 3));
    CHECK(a.trajectory.gates == b.trajectory.gates);
    CHECK(a.trajectory.task_loss == b.trajectory.task_loss);
    CHECK(a.gates.alpha == b.gates.alpha);
  }
  SUBCASE("penalty closes gates") {
    const double balanced = train_gates(m, corpus, short_run(0, std::nullopt)).lambda_resource;
    const GateTrainResult loose = train_gates(m, corpus, short_run(40, 0.0));
    const GateTrainResult tight = train_gates(m, corpus, short_run(40, 3 * balanced));
    double a = 0, b = 0;
    for (double g : loose.gates.values()) a += g;
    for (double g : tight.gates.values()) b += g;
    CHECK(b < a);
  }
  SUBCASE("printed gradient variant runs") {
    GateTrainConfig g = short_run(5, 1e-4);
    g.gradient = GateGradient::Printed;
    CHECK_NOTHROW(train_gates(m, corpus, g));
  }
  SUBCASE("invalid input") {
    CHECK_THROWS_AS(train_gates(m, corpus, short_run(3, -1.0)), std::invalid_argument);
    CHECK_THROWS(train_gates(m, std::vector<int>(5, 1), short_run(3, std::nullopt)));
    Model broken = m;
    broken.lm_head[0] = std::numeric_limits<double>::quiet_NaN();
    try {
      train_gates(broken, corpus, short_run(3, std::nullopt));
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(e.step() == 0);
    }
  }
}

TEST_CASE("rank and remove") {
  const ModelConfig c = tiny_config(4, 8, 2, 32, 11, 8);
  const Model m = loud_model(c, 5);
  GateSet g = GateSet::init(4, GateSchedule{}, 0.95);
  // Close block 2 completely and block 0 halfway.
  g.alpha[2 * 2] = g.alpha[2 * 2 + 1] = 0.0;
  g.alpha[0] = 0.0;
  const PrunedModel none = rank_and_remove(m, g, 0.0);
  CHECK(none.report.removed.empty());
  REQUIRE(none.model.blocks.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(none.model.blocks[i] == m.blocks[i]);

  const PrunedModel p = rank_and_remove(m, g, 0.25);
  CHECK(p.report.removed == std::vector<std::size_t>{2});
  CHECK(p.report.ranking.front() == 2);
  CHECK(p.report.ranking[1] == 0);
  REQUIRE(p.model.blocks.size() == 3);
  CHECK(p.model.blocks[2] == m.blocks[3]);

  const std::vector<double> bi = {0.5, 0.1, 0.9, 0.2};
  CHECK(remove_by_scores(m, bi, 0.5, "bi").report.removed == std::vector<std::size_t>{1, 3});
}

TEST_CASE("report serialization") {
  GateSet g = GateSet::init(3, GateSchedule{0.2, 0.9, 50}, 0.8);
  g.alpha[3] = -0.4;
  g.step = 170;
  const nlohmann::json j = gates_to_json(g);
  const GateSet back = gates_from_json(j);
  CHECK(back.alpha == g.alpha);
  CHECK(back.step == 170);
  CHECK(back.schedule.eps0 == 0.2);
  CHECK(back.schedule.interval == 50);
  CHECK(j.at("gates").size() == 6);
  CHECK(j.at("eps").get<double>() == g.eps());

  RemovalReport r{"gate", {0.3, 0.1, 0.7}, {1, 0, 2}, {1}, 0.3, 1.0 / 3.0};
  const RemovalReport rb = removal_from_json(removal_to_json(r));
  CHECK(rb.method == r.method);
  CHECK(rb.block_scores == r.block_scores);
  CHECK(rb.ranking == r.ranking);
  CHECK(rb.removed == r.removed);
  CHECK(rb.realized_ratio == r.realized_ratio);
  CHECK_THROWS(removal_from_json(nlohmann::json::object()));
}

TEST_CASE("trajectory csv") {
  GateTrajectory t;
  t.eps = {0.1, 0.1};
  t.task_loss = {2.0, 1.5};
  t.penalty = {2.0, 1.9};
  t.gates = {{0.95, 0.95, 0.95, 0.95}, {0.9, 0.8, 0.7, 0.6}};
  std::istringstream in(trajectory_csv(t));
  std::string header, row;
  std::getline(in, header);
  CHECK(header == "step,eps,task_loss,penalty,g0_att,g0_ffn,g1_att,g1_ffn");
  int rows = 0;
  while (std::getline(in, row)) ++rows;
  CHECK(rows == 2);
}
