// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "foldlab/tensor.hpp"
#include "foldlab/tokenizer.hpp"

namespace foldlab {

struct ModelConfig {
  std::size_t n_layers = 12;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 256;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t d_head() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

// Dense layers are stored input-major ([d_in, d_out]) and applied as x * W,
// so output channel o is column o.
struct BlockWeights {
  Tensor w_qkv;      // d x 3d
  Tensor w_o;        // d x d
  Tensor w_up;       // d x d_ff
  Tensor w_down;     // d_ff x d
  Tensor norm_attn;  // d
  Tensor norm_ffn;   // d

  static BlockWeights zeros(const ModelConfig& config);
  std::size_t dense_params() const;
  std::size_t param_count() const { return dense_params() + norm_attn.numel() + norm_ffn.numel(); }
  bool operator==(const BlockWeights&) const = default;
};

struct Model {
  ModelConfig config;
  Tokenizer tokenizer;
  Tensor token_embedding;     // vocab x d
  Tensor position_embedding;  // max_seq x d
  std::vector<BlockWeights> blocks;
  Tensor final_norm;  // d
  Tensor lm_head;     // d x vocab

  std::size_t param_count() const;
  // Parameters inside transformer blocks, excluding embeddings and head.
  std::size_t block_param_count() const;
};

// Gaussian(0, 0.02) weights with residual-output projections scaled by
// 1/sqrt(2L); unit norm gains. Deterministic in config.seed.
Model init_model(const ModelConfig& config, Tokenizer tokenizer = {});

// One pre-norm residual block on a b x s x d activation.
Tensor block_forward(const Tensor& x, const BlockWeights& weights, const ModelConfig& config);

// Each sub-layer blends identity and its full residual output:
// x + g * branch(x). g = 0 is the identity, g = 1 the plain block.
Tensor gated_block_forward(const Tensor& x, const BlockWeights& weights,
                           const ModelConfig& config, double g_att, double g_ffn);

struct CollectedForward {
  Tensor logits;               // rows x seq x vocab
  std::vector<Tensor> hidden;  // X^0 (embeddings) .. X^L
};

CollectedForward forward_collect(const Model& model, const Batch& batch);
Tensor model_logits(const Model& model, const Batch& batch);
// Mean next-token cross-entropy on one batch.
double model_loss(const Model& model, const Batch& batch);

// Model with the listed blocks dropped, remaining blocks keeping their order.
Model remove_blocks(const Model& model, const std::vector<std::size_t>& removed);

}  // namespace foldlab
