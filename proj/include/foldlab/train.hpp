// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <unordered_set>
#include <vector>

#include "foldlab/model.hpp"
#include "foldlab/optim.hpp"

namespace foldlab {

struct BaseTrainConfig {
  std::size_t steps = 2000;
  double lr = 3e-3;
  std::size_t batch_size = 8;
  std::size_t seq_len = 0;  // 0 = model max_seq
  std::size_t warmup_steps = 50;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct BaseTrainResult {
  Model model;
  std::vector<double> losses;
};

// Every parameter of a dense model with its tape name.
std::vector<NamedTensor> named_parameters(Model& model);

// AdamW language-model training on random corpus windows. Parameters listed
// in `frozen` are held fixed. Throws NumericalError with the step index on a
// non-finite loss.
BaseTrainResult train_model(Model model, std::span<const int> corpus,
                            const BaseTrainConfig& config,
                            const std::unordered_set<std::string>& frozen = {});

inline BaseTrainResult train_base(const ModelConfig& config, const Tokenizer& tokenizer,
                                  std::span<const int> corpus, const BaseTrainConfig& train) {
  return train_model(init_model(config, tokenizer), corpus, train);
}

// Shrinks the residual-output projections of `block` by `shrink`, then
// fine-tunes every other parameter so the network adapts around a block that
// is now close to the identity.
Model plant_identity_block(Model model, std::size_t block, double shrink,
                           std::span<const int> corpus, const BaseTrainConfig& finetune);

}  // namespace foldlab
