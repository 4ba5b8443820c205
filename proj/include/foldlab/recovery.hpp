// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "foldlab/eval.hpp"
#include "foldlab/fold.hpp"
#include "foldlab/optim.hpp"

namespace foldlab {

// One adapter per dense layer of every group parent. `down` is drawn from
// N(0, init_std), `up` starts at zero so the model output is unchanged.
// Rejects rank 0 and rank >= the smallest layer dimension.
void attach_lora(FoldedModel& folded, std::size_t rank, std::uint64_t seed,
                 double init_std = 0.02);

struct DistillLosses {
  double attention = 0.0;       // L_AT
  double value_relation = 0.0;  // L_VR
};

// Last-block signals, one distribution per (row, head, position):
// probs = attention probabilities, relation = softmax(causal(V V^T / sqrt(d_head))).
struct DistillSignals {
  Tensor probs;     // [b*h, s, s]
  Tensor relation;  // [b*h, s, s]
};

DistillSignals distill_signals(const NetworkRef& net, const Batch& batch);

// Mean-over-rows KL(teacher || student) of both signals at the final block.
DistillLosses distill_losses(const NetworkRef& teacher, const NetworkRef& student,
                             const Batch& batch);

struct TrainableManifest {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
  std::size_t trainable_count = 0;
  std::size_t frozen_count = 0;

  std::unordered_set<std::string> trainable_set() const {
    return {trainable.begin(), trainable.end()};
  }
};

// LoRA factors, child scales and (optionally) child norms. Everything else,
// including parent dense weights, embeddings, the head and unfolded blocks,
// is frozen.
TrainableManifest select_trainable(const FoldedModel& folded, bool train_child_norms = true);

struct RecoveryConfig {
  double lr = 1e-5;
  std::size_t warmup_steps = 100;
  std::size_t batch_size = 32;
  std::size_t epochs = 2;
  double lambda_distill = 1e-5;
  std::size_t lora_rank = 8;
  AdamWConfig adamw;
  bool train_child_norms = true;
  std::size_t seq_len = 0;      // training window length in tokens; 0 = max_seq + 1
  std::size_t max_windows = 0;  // cap on training windows per epoch; 0 = all
  std::size_t eval_seq_len = 0;  // 0 = max_seq
  std::size_t eval_max_windows = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RecoveryStep {
  std::size_t step = 0;
  double ce_loss = 0.0;
  double l_at = 0.0;
  double l_vr = 0.0;
  double lr = 0.0;
};

struct RecoveryResult {
  FoldedModel model;
  std::vector<RecoveryStep> trace;
  EvalReport before;
  EvalReport after;
};

// Minimizes CE + lambda_distill * (L_AT + L_VR) over `epochs` shuffled
// passes of the training windows. Adapters are attached first when the
// model has none. Throws NumericalError with the step index on a non-finite
// loss.
RecoveryResult recover_train(FoldedModel student, const Model& teacher,
                             std::span<const int> train_tokens, std::span<const int> eval_tokens,
                             const RecoveryConfig& config);

std::string recovery_trace_csv(std::span<const RecoveryStep> trace);

}  // namespace foldlab
