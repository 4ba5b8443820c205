// SPDX-License-Identifier: Apache-2.0
#include "foldlab/network.hpp"

#include <cmath>

#include "foldlab/errors.hpp"

namespace foldlab {

Var ParamBinder::bind(const std::string& name, const Tensor& value) {
  if (auto it = bound_.find(&value); it != bound_.end()) return it->second;
  const bool train = trainable_ && trainable_->contains(name);
  const Var v = train ? tape_.parameter(name, value) : tape_.constant_ref(value);
  bound_.emplace(&value, v);
  return v;
}

SlotRef block_view(const BlockWeights& w, const std::string& prefix) {
  SlotRef slot;
  const std::array<const Tensor*, 4> weights = {&w.w_qkv, &w.w_o, &w.w_up, &w.w_down};
  for (std::size_t i = 0; i < 4; ++i) {
    slot.dense[i].weight = weights[i];
    slot.dense[i].weight_name = prefix + ".w_" + kDenseNames[i];
  }
  slot.norm_attn = &w.norm_attn;
  slot.norm_attn_name = prefix + ".norm_attn";
  slot.norm_ffn = &w.norm_ffn;
  slot.norm_ffn_name = prefix + ".norm_ffn";
  return slot;
}

NetworkRef network_view(const Model& model) {
  NetworkRef net;
  net.config = model.config;
  net.token_embedding = &model.token_embedding;
  net.position_embedding = &model.position_embedding;
  net.final_norm = &model.final_norm;
  net.lm_head = &model.lm_head;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    net.slots.push_back(block_view(model.blocks[i], "block" + std::to_string(i)));
  }
  return net;
}

Var dense_forward(ParamBinder& binder, Var x, const DenseLayerRef& layer) {
  Tape& tape = binder.tape();
  const std::size_t d_out = layer.weight->last_dim();
  for (const Tensor* v : {layer.scale, layer.bias}) {
    if (v && (v->rank() != 1 || v->numel() != d_out)) {
      throw ShapeError("dense: " + layer.weight_name + " has " + std::to_string(d_out) +
                       " output channels but a per-channel vector of shape " + shape_str(v->shape()));
    }
  }
  Var y = tape.matmul(x, binder.bind(layer.weight_name, *layer.weight));
  if (layer.lora_down) {
    const Var low = tape.matmul(x, binder.bind(layer.lora_name + ".down", *layer.lora_down));
    y = tape.add(y, tape.matmul(low, binder.bind(layer.lora_name + ".up", *layer.lora_up)));
  }
  if (layer.scale) y = tape.mul(y, binder.bind(layer.scale_name, *layer.scale));
  if (layer.bias) y = tape.add(y, binder.bind(layer.bias_name, *layer.bias));
  return y;
}

Var slot_forward(ParamBinder& binder, Var x, const SlotRef& slot, std::size_t n_heads,
                 const GateVars* gates, AttentionProbe* probe) {
  Tape& tape = binder.tape();
  const Shape& shape = tape.value(x).shape();
  if (shape.size() != 3) throw ShapeError("block: expected b x s x d input, got " + shape_str(shape));
  const std::size_t b = shape[0], s = shape[1], d = shape[2];
  if (d % n_heads != 0) throw ShapeError("block: d_model not divisible by n_heads");
  const std::size_t dh = d / n_heads;
  const Tensor& w_qkv = *slot.dense[kQkv].weight;
  if (w_qkv.rank() != 2 || w_qkv.dim(0) != d) {
    throw ShapeError("block: input " + shape_str(shape) + " does not match w_qkv " +
                     shape_str(w_qkv.shape()));
  }

  auto heads = [&](Var t) {
    // [b, s, d] -> [b*h, s, dh]
    const Var four = tape.reshape(t, {b, s, n_heads, dh});
    return tape.reshape(tape.transpose12(four), {b * n_heads, s, dh});
  };

  const Var h = tape.rms_norm(x, binder.bind(slot.norm_attn_name, *slot.norm_attn));
  const Var qkv = dense_forward(binder, h, slot.dense[kQkv]);
  const Var q = heads(tape.slice_last(qkv, 0, d));
  const Var k = heads(tape.slice_last(qkv, d, d));
  const Var v = heads(tape.slice_last(qkv, 2 * d, d));
  const Var scores = tape.scale(tape.bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Var probs = tape.softmax(tape.causal_mask(scores));
  const Var ctx = tape.bmm(probs, v, false);
  const Var merged = tape.reshape(tape.transpose12(tape.reshape(ctx, {b, n_heads, s, dh})), {b, s, d});
  Var att = dense_forward(binder, merged, slot.dense[kOut]);
  if (gates) att = tape.scale_by(att, gates->att);
  const Var x_att = tape.add(x, att);

  const Var h2 = tape.rms_norm(x_att, binder.bind(slot.norm_ffn_name, *slot.norm_ffn));
  const Var up = tape.gelu(dense_forward(binder, h2, slot.dense[kUp]));
  Var ffn = dense_forward(binder, up, slot.dense[kDown]);
  if (gates) ffn = tape.scale_by(ffn, gates->ffn);

  if (probe) {
    probe->probs = probs;
    probe->values = v;
    probe->captured = true;
  }
  return tape.add(x_att, ffn);
}

ForwardGraph build_forward(Tape& tape, const NetworkRef& net, const Batch& batch,
                           const ForwardOptions& options) {
  if (batch.seq > net.config.max_seq) {
    throw ShapeError("forward: sequence length " + std::to_string(batch.seq) +
                     " exceeds max_seq " + std::to_string(net.config.max_seq));
  }
  if (batch.inputs.size() != batch.rows * batch.seq) {
    throw ShapeError("forward: batch holds " + std::to_string(batch.inputs.size()) +
                     " ids, expected " + std::to_string(batch.rows * batch.seq));
  }
  if (!options.gates.empty() && options.gates.size() != net.slots.size()) {
    throw ShapeError("forward: " + std::to_string(options.gates.size()) + " gates for " +
                     std::to_string(net.slots.size()) + " blocks");
  }
  ParamBinder binder(tape, options.trainable);
  const Var tok = tape.embedding(binder.bind("tok_emb", *net.token_embedding), batch.inputs,
                                 {batch.rows, batch.seq});
  std::vector<int> positions(batch.seq);
  for (std::size_t t = 0; t < batch.seq; ++t) positions[t] = static_cast<int>(t);
  const Var pos =
      tape.embedding(binder.bind("pos_emb", *net.position_embedding), positions, {batch.seq});
  Var x = tape.add(tok, pos);

  ForwardGraph graph;
  if (options.collect_hidden) graph.hidden.push_back(x);
  for (std::size_t i = 0; i < net.slots.size(); ++i) {
    const GateVars* gate = options.gates.empty() ? nullptr : &options.gates[i];
    const bool last = i + 1 == net.slots.size();
    AttentionProbe* probe = (last && options.probe_last_block) ? &graph.last_block : nullptr;
    x = slot_forward(binder, x, net.slots[i], net.config.n_heads, gate, probe);
    if (options.collect_hidden) graph.hidden.push_back(x);
  }
  const Var normed = tape.rms_norm(x, binder.bind("final_norm", *net.final_norm));
  graph.logits = tape.matmul(normed, binder.bind("lm_head", *net.lm_head));
  return graph;
}

}  // namespace foldlab
