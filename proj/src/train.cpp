// SPDX-License-Identifier: Apache-2.0
#include "foldlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "foldlab/errors.hpp"
#include "foldlab/network.hpp"

namespace foldlab {

std::vector<NamedTensor> named_parameters(Model& m) {
  std::vector<NamedTensor> out{{"tok_emb", &m.token_embedding}, {"pos_emb", &m.position_embedding}};
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    auto& b = m.blocks[i];
    out.push_back({p + ".w_qkv", &b.w_qkv});
    out.push_back({p + ".w_o", &b.w_o});
    out.push_back({p + ".w_up", &b.w_up});
    out.push_back({p + ".w_down", &b.w_down});
    out.push_back({p + ".norm_attn", &b.norm_attn});
    out.push_back({p + ".norm_ffn", &b.norm_ffn});
  }
  out.push_back({"final_norm", &m.final_norm});
  out.push_back({"lm_head", &m.lm_head});
  return out;
}

BaseTrainResult train_model(Model model, std::span<const int> corpus,
                            const BaseTrainConfig& config,
                            const std::unordered_set<std::string>& frozen) {
  const std::size_t seq = config.seq_len ? config.seq_len : model.config.max_seq;
  if (corpus.size() < seq + 1) {
    throw std::invalid_argument("train: corpus too small for one window of " +
                                std::to_string(seq + 1) + " tokens");
  }
  std::vector<NamedTensor> params;
  std::unordered_set<std::string> trainable;
  for (auto& p : named_parameters(model)) {
    if (frozen.contains(p.name)) continue;
    trainable.insert(p.name);
    params.push_back(p);
  }
  AdamW opt(AdamWConfig{.weight_decay = config.weight_decay});
  std::mt19937_64 rng(config.seed);
  BaseTrainResult result;
  result.losses.reserve(config.steps);
  const NetworkRef net = network_view(model);
  ForwardOptions opts;
  opts.trainable = &trainable;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const Batch batch = sample_batch(corpus, config.batch_size, seq, rng);
    Tape tape;
    const ForwardGraph g = build_forward(tape, net, batch, opts);
    const Var loss = tape.cross_entropy(g.logits, batch.targets);
    const double value = tape.value(loss).item();
    if (!std::isfinite(value)) {
      throw NumericalError("train: non-finite loss at step " + std::to_string(step), step);
    }
    result.losses.push_back(value);
    const GradMap grads = tape.backward(loss);
    const double warm = config.warmup_steps
                            ? std::min(1.0, static_cast<double>(step + 1) /
                                                static_cast<double>(config.warmup_steps))
                            : 1.0;
    opt.step(params, grads, config.lr * warm);
  }
  result.model = std::move(model);
  return result;
}

Model plant_identity_block(Model model, std::size_t block, double shrink,
                           std::span<const int> corpus, const BaseTrainConfig& finetune) {
  if (block >= model.blocks.size()) throw std::out_of_range("plant_identity_block: bad block");
  auto& b = model.blocks[block];
  for (auto& v : b.w_o.data()) v *= shrink;
  for (auto& v : b.w_down.data()) v *= shrink;
  const std::string p = "block" + std::to_string(block);
  const std::unordered_set<std::string> frozen = {p + ".w_qkv", p + ".w_o", p + ".w_up",
                                                  p + ".w_down", p + ".norm_attn",
                                                  p + ".norm_ffn"};
  return train_model(std::move(model), corpus, finetune, frozen).model;
}

}  // namespace foldlab
