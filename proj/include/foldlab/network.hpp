// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "foldlab/model.hpp"
#include "foldlab/tape.hpp"

namespace foldlab {

// Non-owning description of a decoder stack. Dense models, folded models and
// adapter-carrying models all lower to this before building a tape, so there
// is exactly one forward implementation.
struct DenseLayerRef {
  const Tensor* weight = nullptr;
  std::string weight_name;
  const Tensor* scale = nullptr;  // per output channel
  std::string scale_name;
  const Tensor* bias = nullptr;
  std::string bias_name;
  const Tensor* lora_down = nullptr;  // d_in x r
  const Tensor* lora_up = nullptr;    // r x d_out
  std::string lora_name;
};

enum DenseSlot : std::size_t { kQkv = 0, kOut = 1, kUp = 2, kDown = 3 };
inline constexpr std::array<const char*, 4> kDenseNames = {"qkv", "o", "up", "down"};

struct SlotRef {
  std::array<DenseLayerRef, 4> dense;
  const Tensor* norm_attn = nullptr;
  std::string norm_attn_name;
  const Tensor* norm_ffn = nullptr;
  std::string norm_ffn_name;
};

struct NetworkRef {
  ModelConfig config;
  const Tensor* token_embedding = nullptr;
  const Tensor* position_embedding = nullptr;
  const Tensor* final_norm = nullptr;
  const Tensor* lm_head = nullptr;
  std::vector<SlotRef> slots;
};

NetworkRef network_view(const Model& model);
SlotRef block_view(const BlockWeights& weights, const std::string& prefix);

// Registers tensors on a tape, once per storage address, as gradient
// receiving parameters when their name is in the trainable set.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const std::unordered_set<std::string>* trainable)
      : tape_(tape), trainable_(trainable) {}
  Var bind(const std::string& name, const Tensor& value);
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const std::unordered_set<std::string>* trainable_;
  std::unordered_map<const Tensor*, Var> bound_;
};

struct GateVars {
  Var att;
  Var ffn;
};

// Attention internals of one block, per head: probs [b*h, s, s] and
// values [b*h, s, d_head].
struct AttentionProbe {
  Var probs;
  Var values;
  bool captured = false;
};

Var dense_forward(ParamBinder& binder, Var x, const DenseLayerRef& layer);

Var slot_forward(ParamBinder& binder, Var x, const SlotRef& slot, std::size_t n_heads,
                 const GateVars* gates, AttentionProbe* probe);

struct ForwardOptions {
  const std::unordered_set<std::string>* trainable = nullptr;
  std::span<const GateVars> gates;  // empty, or one per slot
  bool collect_hidden = false;
  bool probe_last_block = false;
};

struct ForwardGraph {
  Var logits;
  std::vector<Var> hidden;
  AttentionProbe last_block;
};

ForwardGraph build_forward(Tape& tape, const NetworkRef& net, const Batch& batch,
                           const ForwardOptions& options = {});

}  // namespace foldlab
