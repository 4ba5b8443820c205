// SPDX-License-Identifier: Apache-2.0
#include "foldlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "foldlab/errors.hpp"
#include "foldlab/network.hpp"

namespace foldlab {

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1) {
    throw std::invalid_argument("model config: all extents must be >= 1");
  }
  if (max_seq < 2) throw std::invalid_argument("model config: max_seq must be >= 2");
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
}

BlockWeights BlockWeights::zeros(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  return BlockWeights{Tensor({d, 3 * d}), Tensor({d, d}),      Tensor({d, c.d_ff}),
                      Tensor({c.d_ff, d}), Tensor({d}, 1.0), Tensor({d}, 1.0)};
}

std::size_t BlockWeights::dense_params() const {
  return w_qkv.numel() + w_o.numel() + w_up.numel() + w_down.numel();
}

std::size_t Model::block_param_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.param_count();
  return n;
}

std::size_t Model::param_count() const {
  return token_embedding.numel() + position_embedding.numel() + final_norm.numel() +
         lm_head.numel() + block_param_count();
}

Model init_model(const ModelConfig& config, Tokenizer tokenizer) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](Shape shape, double std) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = std * normal(rng);
    return t;
  };
  const std::size_t d = config.d_model;
  const double out_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  Model m;
  m.config = config;
  m.tokenizer = std::move(tokenizer);
  m.token_embedding = gaussian({config.vocab_size, d}, 0.02);
  m.position_embedding = gaussian({config.max_seq, d}, 0.02);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    BlockWeights b = BlockWeights::zeros(config);
    b.w_qkv = gaussian({d, 3 * d}, 0.02);
    b.w_o = gaussian({d, d}, out_std);
    b.w_up = gaussian({d, config.d_ff}, 0.02);
    b.w_down = gaussian({config.d_ff, d}, out_std);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = Tensor({d}, 1.0);
  m.lm_head = gaussian({d, config.vocab_size}, 0.02);
  return m;
}

namespace {
Tensor run_block(const Tensor& x, const BlockWeights& weights, const ModelConfig& config,
                 const double* g_att, const double* g_ffn) {
  if (x.rank() != 3 || x.dim(2) != config.d_model) {
    throw ShapeError("block_forward: input " + shape_str(x.shape()) + " does not match d_model " +
                     std::to_string(config.d_model));
  }
  Tape tape;
  ParamBinder binder(tape, nullptr);
  const Var in = tape.constant_ref(x);
  GateVars gates;
  if (g_att) {
    gates.att = tape.constant(Tensor::scalar(*g_att));
    gates.ffn = tape.constant(Tensor::scalar(*g_ffn));
  }
  const Var out = slot_forward(binder, in, block_view(weights, "block"), config.n_heads,
                               g_att ? &gates : nullptr, nullptr);
  return tape.value(out);
}
}  // namespace

Tensor block_forward(const Tensor& x, const BlockWeights& weights, const ModelConfig& config) {
  return run_block(x, weights, config, nullptr, nullptr);
}

Tensor gated_block_forward(const Tensor& x, const BlockWeights& weights,
                           const ModelConfig& config, double g_att, double g_ffn) {
  for (double g : {g_att, g_ffn}) {
    if (!(g >= 0.0 && g <= 1.0)) {
      throw std::invalid_argument("gated_block_forward: gate value " + std::to_string(g) +
                                  " outside [0, 1]");
    }
  }
  return run_block(x, weights, config, &g_att, &g_ffn);
}

CollectedForward forward_collect(const Model& model, const Batch& batch) {
  Tape tape;
  ForwardOptions opts;
  opts.collect_hidden = true;
  const ForwardGraph g = build_forward(tape, network_view(model), batch, opts);
  CollectedForward out;
  out.logits = tape.value(g.logits);
  for (Var h : g.hidden) out.hidden.push_back(tape.value(h));
  return out;
}

Tensor model_logits(const Model& model, const Batch& batch) {
  Tape tape;
  return tape.value(build_forward(tape, network_view(model), batch).logits);
}

double model_loss(const Model& model, const Batch& batch) {
  Tape tape;
  const ForwardGraph g = build_forward(tape, network_view(model), batch);
  return tape.value(tape.cross_entropy(g.logits, batch.targets)).item();
}

Model remove_blocks(const Model& model, const std::vector<std::size_t>& removed) {
  const std::set<std::size_t> drop(removed.begin(), removed.end());
  for (auto i : drop) {
    if (i >= model.blocks.size()) {
      throw std::out_of_range("remove_blocks: block " + std::to_string(i) + " does not exist");
    }
  }
  if (drop.size() >= model.blocks.size()) {
    throw std::invalid_argument("remove_blocks: at least one block must remain");
  }
  Model out = model;
  out.blocks.clear();
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    if (!drop.contains(i)) out.blocks.push_back(model.blocks[i]);
  }
  out.config.n_layers = out.blocks.size();
  return out;
}

}  // namespace foldlab
