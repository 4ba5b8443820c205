// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "foldlab/errors.hpp"
#include "foldlab/network.hpp"
#include "foldlab/recovery.hpp"
#include "test_util.hpp"

using namespace foldlab;
using namespace foldlab::testing;

namespace {

FoldPlan one_group(std::size_t parent, std::size_t child, std::vector<std::size_t> removed = {}) {
  FoldPlan p;
  p.removed = std::move(removed);
  p.groups.push_back({parent, {child}, 0.9});
  return p;
}

Tensor plus_low_rank(const Tensor& w, const LoraAdapter& a) {
  Tape t;
  return t.value(t.add(t.constant(w), t.matmul(t.constant(a.down), t.constant(a.up))));
}

RecoveryConfig quick(std::size_t epochs = 1) {
  RecoveryConfig rc;
  rc.lr = 1e-2;
  rc.warmup_steps = 2;
  rc.batch_size = 2;
  rc.epochs = epochs;
  rc.lambda_distill = 0.5;
  rc.lora_rank = 2;
  rc.seed = 4;
  return rc;
}

}  // namespace

TEST_CASE("attach_lora shapes and zero start") {
  const ModelConfig c = tiny_config(4, 8, 2, 32, 11, 8);
  FoldedModel f = apply_fold(loud_model(c, 3), one_group(1, 2));
  const Batch batch = random_batch(2, 8, c.vocab_size, 1);
  const Tensor before = folded_logits(f, batch);
  CHECK_THROWS(attach_lora(f, 0, 1));
  CHECK_THROWS(attach_lora(f, 8, 1));
  attach_lora(f, 4, 1);
  CHECK(f.lora_rank == 4);
  REQUIRE(f.lora.size() == 1);
  const std::array<std::pair<std::size_t, std::size_t>, 4> dims = {{{8, 24}, {8, 8}, {8, 32}, {32, 8}}};
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(f.lora[0][k].down.shape() == Shape{dims[k].first, 4});
    CHECK(f.lora[0][k].up.shape() == Shape{4, dims[k].second});
    CHECK(f.lora[0][k].down.numel() + f.lora[0][k].up.numel() == 4 * (dims[k].first + dims[k].second));
    for (double v : f.lora[0][k].up.data()) CHECK(v == 0.0);
  }
  CHECK(max_abs_diff(folded_logits(f, batch), before) <= 1e-12);
}

TEST_CASE("low-rank path matches materialized W + PQ") {
  const ModelConfig c = tiny_config(4, 8, 2, 32, 11, 8);
  const Model m = loud_model(c, 13);
  FoldedModel f = apply_fold(m, one_group(1, 2));
  attach_lora(f, 3, 2);
  std::mt19937_64 rng(6);
  for (auto& a : f.lora[0]) {
    a.down = random_tensor(a.down.shape(), rng, 0.3);
    a.up = random_tensor(a.up.shape(), rng, 0.3);
  }
  // The adapter updates the shared weight, so parent and child both see it.
  Model mat = m;
  for (std::size_t b : {1, 2}) {
    mat.blocks[b].w_qkv = plus_low_rank(m.blocks[1].w_qkv, f.lora[0][kQkv]);
    mat.blocks[b].w_o = plus_low_rank(m.blocks[1].w_o, f.lora[0][kOut]);
    mat.blocks[b].w_up = plus_low_rank(m.blocks[1].w_up, f.lora[0][kUp]);
    mat.blocks[b].w_down = plus_low_rank(m.blocks[1].w_down, f.lora[0][kDown]);
  }
  const Batch batch = random_batch(2, 8, c.vocab_size, 2);
  CHECK(max_abs_diff(folded_logits(f, batch), model_logits(mat, batch)) <= 1e-12);
}

TEST_CASE("distillation losses") {
  const ModelConfig c = tiny_config(3, 8, 2, 32, 11, 8);
  const Model teacher = loud_model(c, 1);
  const Batch batch = random_batch(2, 8, c.vocab_size, 3);
  const DistillLosses same = distill_losses(network_view(teacher), network_view(teacher), batch);
  CHECK(same.attention == 0.0);
  CHECK(same.value_relation == 0.0);

  const DistillSignals s = distill_signals(network_view(teacher), batch);
  CHECK(s.probs.shape() == Shape{4, 8, 8});
  CHECK(s.relation.shape() == Shape{4, 8, 8});
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t i = 0; i < 8; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < 8; ++j) {
        if (j > i) CHECK(s.relation[(m * 8 + i) * 8 + j] == 0.0);
        row += s.relation[(m * 8 + i) * 8 + j];
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    }

  for (std::uint64_t seed = 2; seed < 8; ++seed) {
    const Model student = loud_model(c, seed * 10);
    const DistillLosses d = distill_losses(network_view(teacher), network_view(student), batch);
    CHECK(d.attention > 0.0);
    CHECK(d.value_relation > 0.0);
  }
  // The shallower folded model still has a last block to compare.
  const FoldedModel f = apply_fold(teacher, one_group(0, 2, {1}));
  CHECK(distill_losses(network_view(teacher), network_view(f), batch).attention >= 0.0);
  // Relations are width independent; a different head count is not.
  const ModelConfig wide = tiny_config(3, 16, 2, 32, 11, 8);
  CHECK_NOTHROW(distill_losses(network_view(teacher), network_view(loud_model(wide)), batch));
  const ModelConfig heads = tiny_config(3, 8, 4, 32, 11, 8);
  CHECK_THROWS_AS(distill_losses(network_view(teacher), network_view(loud_model(heads)), batch), ShapeError);
}

TEST_CASE("value relation matches a hand evaluation") {
  const ModelConfig c = tiny_config(1, 4, 1, 8, 5, 3);
  const Model m = loud_model(c, 5);
  const Batch batch = random_batch(1, 3, c.vocab_size, 9);
  const CollectedForward fc = forward_collect(m, batch);
  // Values of the single head: RMS(x) W_qkv[:, 2d:3d].
  const Tensor& x = fc.hidden[0];
  const auto& w = m.blocks[0];
  std::vector<double> v(3 * 4, 0.0);
  for (std::size_t t = 0; t < 3; ++t) {
    double ss = 0;
    for (std::size_t i = 0; i < 4; ++i) ss += x[t * 4 + i] * x[t * 4 + i];
    const double inv = 1.0 / std::sqrt(ss / 4 + 1e-5);
    for (std::size_t e = 0; e < 4; ++e)
      for (std::size_t i = 0; i < 4; ++i) v[t * 4 + e] += x[t * 4 + i] * inv * w.norm_attn[i] * w.w_qkv[i * 12 + 8 + e];
  }
  const DistillSignals s = distill_signals(network_view(m), batch);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> z(i + 1);
    double total = 0;
    for (std::size_t j = 0; j <= i; ++j) {
      double dot = 0;
      for (std::size_t e = 0; e < 4; ++e) dot += v[i * 4 + e] * v[j * 4 + e];
      total += (z[j] = std::exp(dot / 2.0));
    }
    for (std::size_t j = 0; j <= i; ++j) CHECK(std::abs(s.relation[i * 3 + j] - z[j] / total) <= 1e-12);
  }
}

TEST_CASE("trainable manifest") {
  const ModelConfig c = tiny_config(4, 8, 2, 32, 11, 8);
  const Model m = loud_model(c, 7);

  const FoldedModel unfolded = apply_fold(m, FoldPlan{});
  const TrainableManifest none = select_trainable(unfolded);
  CHECK(none.trainable.empty());
  CHECK(none.trainable_count == 0);

  FoldedModel f = apply_fold(m, one_group(1, 2));
  attach_lora(f, 4, 1);
  const TrainableManifest t = select_trainable(f, true);
  CHECK(t.trainable_count == 512 + 72 + 16);
  CHECK(t.trainable_count == 600);
  CHECK(select_trainable(f, false).trainable_count == 584);

  std::set<std::string> all;
  for (const auto& p : named_parameters(f)) all.insert(p.name);
  std::set<std::string> tr(t.trainable.begin(), t.trainable.end());
  std::set<std::string> fr(t.frozen.begin(), t.frozen.end());
  std::set<std::string> joined = tr;
  joined.insert(fr.begin(), fr.end());
  CHECK(joined == all);
  CHECK(tr.size() + fr.size() == all.size());
  CHECK(t.trainable_count + t.frozen_count == count_params(f).total);
}

TEST_CASE("recovery training") {
  const ModelConfig c = tiny_config(4, 8, 2, 32, 11, 8);
  const Model teacher = loud_model(c, 17);
  const std::vector<int> train = random_tokens(600, c.vocab_size, 1);
  const std::vector<int> eval = random_tokens(200, c.vocab_size, 2);
  const FoldedModel folded = apply_fold(teacher, one_group(1, 3, {2}));

  SUBCASE("frozen parameters stay bit-identical") {
    RecoveryConfig rc = quick(3);
    const RecoveryResult r = recover_train(folded, teacher, train, eval, rc);
    CHECK(r.trace.size() == 3 * 33);
    FoldedModel after = r.model;
    FoldedModel start = folded;
    attach_lora(start, rc.lora_rank, rc.seed);
    const auto trainable = select_trainable(after).trainable_set();
    const auto a = named_parameters(after);
    const auto b = named_parameters(start);
    REQUIRE(a.size() == b.size());
    std::size_t moved = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].name == b[i].name);
      if (trainable.contains(a[i].name)) {
        moved += !(*a[i].tensor == *b[i].tensor);
      } else {
        CHECK_MESSAGE(*a[i].tensor == *b[i].tensor, a[i].name);
      }
    }
    CHECK(moved > 0);
  }
  SUBCASE("deterministic for a seed") {
    const RecoveryResult a = recover_train(folded, teacher, train, eval, quick());
    const RecoveryResult b = recover_train(folded, teacher, train, eval, quick());
    CHECK(a.after.perplexity == b.after.perplexity);
    CHECK(a.trace.back().ce_loss == b.trace.back().ce_loss);
  }
  SUBCASE("zero distillation weight ignores the teacher") {
    RecoveryConfig rc = quick();
    rc.lambda_distill = 0.0;
    const RecoveryResult a = recover_train(folded, teacher, train, eval, rc);
    const RecoveryResult b = recover_train(folded, loud_model(c, 99), train, eval, rc);
    CHECK(a.after.perplexity == b.after.perplexity);
    for (const auto& s : a.trace) {
      CHECK(s.l_at == 0.0);
      CHECK(s.l_vr == 0.0);
    }
  }
  SUBCASE("with distillation the teacher matters") {
    const RecoveryResult a = recover_train(folded, teacher, train, eval, quick());
    const RecoveryResult b = recover_train(folded, loud_model(c, 99), train, eval, quick());
    CHECK(a.after.perplexity != b.after.perplexity);
    CHECK(a.trace.front().l_at > 0.0);
  }
  SUBCASE("warmup ramps the learning rate") {
    const RecoveryResult r = recover_train(folded, teacher, train, eval, quick());
    CHECK(r.trace[0].lr == doctest::Approx(5e-3));
    CHECK(r.trace[1].lr == doctest::Approx(1e-2));
    CHECK(r.trace[5].lr == doctest::Approx(1e-2));
  }
  SUBCASE("nothing folded means nothing to train") {
    const RecoveryResult r = recover_train(apply_fold(teacher, FoldPlan{}), teacher, train, eval, quick());
    CHECK(r.trace.empty());
    CHECK(r.before.perplexity == r.after.perplexity);
  }
  SUBCASE("invalid settings") {
    RecoveryConfig rc = quick();
    rc.lr = 0.0;
    CHECK_THROWS(recover_train(folded, teacher, train, eval, rc));
    rc = quick();
    rc.epochs = 0;
    CHECK_THROWS(recover_train(folded, teacher, train, eval, rc));
    RecoveryConfig huge = quick();
    huge.lr = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(recover_train(folded, teacher, train, eval, huge), NumericalError);
  }
}
