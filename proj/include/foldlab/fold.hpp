// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "foldlab/checkpoint.hpp"
#include "foldlab/gates.hpp"
#include "foldlab/model.hpp"
#include "foldlab/network.hpp"
#include "foldlab/optim.hpp"
#include "foldlab/profiler.hpp"

namespace foldlab {

// Block indices are in the original (pre-removal) numbering.
struct FoldGroup {
  std::size_t parent = 0;
  std::vector<std::size_t> children;
  double similarity = 0.0;  // cos(X^first, X^{last+1}) over the retained stack
};

struct FoldPlan {
  std::vector<std::size_t> removed;
  std::vector<FoldGroup> groups;  // ordered by parent index
  std::size_t group_size = 2;
  double requested_ratio = 0.0;
  double realized_ratio = 0.0;  // child block parameters / all original block parameters
};

// Greedy choice of non-overlapping windows of `group_size` consecutive
// retained blocks, highest group similarity first (ties to the lower
// position), until the child fraction reaches `fold_ratio`.
// `retained_profile` profiles the model after removal; `block_params` lists
// the parameter count of every original block.
FoldPlan plan_fold(const SimilarityProfile& retained_profile, const RemovalReport& removal,
                   std::span<const std::size_t> block_params, double fold_ratio,
                   std::size_t group_size = 2);

nlohmann::json fold_plan_to_json(const FoldPlan& plan);
FoldPlan fold_plan_from_json(const nlohmann::json& j);

struct ChildParams {
  std::array<Tensor, 4> scales;  // one per dense layer, length d_out
  std::array<Tensor, 4> biases;  // used only when FoldedModel::has_bias
  Tensor norm_attn;
  Tensor norm_ffn;
};

// Low-rank update to a d_in x d_out weight: x W + (x down) up.
struct LoraAdapter {
  Tensor down;  // d_in x r
  Tensor up;    // r x d_out
};

struct FoldSlot {
  std::size_t storage = 0;  // index into FoldedModel::storage
  std::optional<std::size_t> child;  // index into FoldedModel::children
  std::size_t original = 0;          // original block index
};

struct FoldedModel {
  ModelConfig config;  // n_layers counts slots
  Tokenizer tokenizer;
  Tensor token_embedding;
  Tensor position_embedding;
  Tensor final_norm;
  Tensor lm_head;
  std::vector<BlockWeights> storage;  // parents and unfolded blocks
  std::vector<ChildParams> children;
  std::vector<FoldSlot> slots;
  std::vector<std::size_t> parent_storage;  // storage indices that head a group
  bool has_bias = false;
  std::size_t lora_rank = 0;
  std::vector<std::array<LoraAdapter, 4>> lora;  // parallel to parent_storage
  FoldPlan plan;

  bool is_parent(std::size_t storage_index) const;
};

struct FoldOptions {
  bool with_bias = false;  // carry zero bias vectors on child dense layers
};

// Folds `model` (the original dense model) according to `plan`: removed
// blocks are dropped, children lose their dense storage and bind the
// parent's, scales start at one and child norms are copied from the child.
FoldedModel apply_fold(const Model& model, const FoldPlan& plan, const FoldOptions& options = {});

// Tape names: storage k -> "store<k>.w_*", "store<k>.norm_*",
// "store<k>.lora_<layer>.{down,up}"; child c -> "child<c>.scale_<layer>",
// "child<c>.bias_<layer>", "child<c>.norm_*".
NetworkRef network_view(const FoldedModel& folded);

// s * (x W) + b on a plain tensor using the fused post-matmul scaling.
Tensor child_dense_forward(const Tensor& x, const Tensor& weight, const Tensor& scale,
                           const Tensor* bias = nullptr);

Tensor folded_logits(const FoldedModel& folded, const Batch& batch);

enum class ParamCategory { SharedDense, ChildScale, Norm, Bias, Lora, Embedding, Head };
const char* category_name(ParamCategory c);

struct ParamEntry {
  std::string name;
  Shape shape;
  std::size_t count = 0;
  ParamCategory category = ParamCategory::SharedDense;
  bool in_block = true;
  bool trainable = false;
};

struct ParamManifest {
  std::vector<ParamEntry> entries;
  std::size_t total = 0;
  std::size_t block_total = 0;  // everything stored inside transformer blocks
  std::size_t by_category(ParamCategory c) const;
  // 1 - block_total / dense_block_total
  double compression_vs(std::size_t dense_block_total) const;
  nlohmann::json to_json() const;
};

// Every stored array exactly once; shared parent storage counts once.
// `trainable` marks entries by tape name.
ParamManifest count_params(const Model& model,
                           const std::unordered_set<std::string>* trainable = nullptr);
ParamManifest count_params(const FoldedModel& folded,
                           const std::unordered_set<std::string>* trainable = nullptr);

// Every parameter of a folded model with its tape name.
std::vector<NamedTensor> named_parameters(FoldedModel& folded);

TensorArchive folded_to_archive(const FoldedModel& folded);
FoldedModel folded_from_archive(const TensorArchive& archive);
void save_folded(const std::string& path, const FoldedModel& folded);
FoldedModel load_folded(const std::string& path);

}  // namespace foldlab
