// SPDX-License-Identifier: Apache-2.0
#include "foldlab/fold.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "foldlab/errors.hpp"

namespace foldlab {

namespace {

std::vector<std::size_t> retained_blocks(std::size_t n_blocks, std::span<const std::size_t> removed) {
  const std::set<std::size_t> drop(removed.begin(), removed.end());
  for (auto i : drop) {
    if (i >= n_blocks) throw std::out_of_range("fold: removed block " + std::to_string(i) + " does not exist");
  }
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n_blocks; ++i) {
    if (!drop.contains(i)) kept.push_back(i);
  }
  return kept;
}

std::array<std::size_t, 4> layer_outputs(const ModelConfig& c) {
  return {3 * c.d_model, c.d_model, c.d_ff, c.d_model};
}

std::array<std::size_t, 4> layer_inputs(const ModelConfig& c) {
  return {c.d_model, c.d_model, c.d_model, c.d_ff};
}

}  // namespace

FoldPlan plan_fold(const SimilarityProfile& profile, const RemovalReport& removal,
                   std::span<const std::size_t> block_params, double fold_ratio,
                   std::size_t group_size) {
  if (!(fold_ratio >= 0.0 && fold_ratio < 1.0)) {
    throw std::invalid_argument("plan_fold: fold ratio " + std::to_string(fold_ratio) + " outside [0, 1)");
  }
  if (group_size < 2) throw std::invalid_argument("plan_fold: group size must be >= 2");
  const std::vector<std::size_t> kept = retained_blocks(block_params.size(), removal.removed);
  if (profile.n_blocks() != kept.size()) {
    throw std::invalid_argument("plan_fold: profile covers " + std::to_string(profile.n_blocks()) +
                                " blocks but " + std::to_string(kept.size()) + " are retained");
  }
  FoldPlan plan;
  plan.removed = removal.removed;
  std::sort(plan.removed.begin(), plan.removed.end());
  plan.group_size = group_size;
  plan.requested_ratio = fold_ratio;
  if (fold_ratio == 0.0) return plan;

  const double total = std::accumulate(block_params.begin(), block_params.end(), 0.0);
  std::vector<std::size_t> starts;
  for (std::size_t p = 0; p + group_size <= kept.size(); ++p) starts.push_back(p);
  std::stable_sort(starts.begin(), starts.end(), [&](std::size_t a, std::size_t b) {
    return profile.group[a][group_size - 1] > profile.group[b][group_size - 1];
  });
  std::vector<bool> used(kept.size(), false);
  double child = 0.0;
  for (std::size_t p : starts) {
    if (child / total >= fold_ratio) break;
    if (std::any_of(used.begin() + static_cast<std::ptrdiff_t>(p),
                    used.begin() + static_cast<std::ptrdiff_t>(p + group_size),
                    [](bool u) { return u; })) {
      continue;
    }
    FoldGroup g;
    g.parent = kept[p];
    g.similarity = profile.group[p][group_size - 1];
    for (std::size_t q = p; q < p + group_size; ++q) {
      used[q] = true;
      if (q > p) {
        g.children.push_back(kept[q]);
        child += static_cast<double>(block_params[kept[q]]);
      }
    }
    plan.groups.push_back(std::move(g));
  }
  if (child / total < fold_ratio) {
    throw std::invalid_argument("plan_fold: fold ratio " + std::to_string(fold_ratio) +
                                " is infeasible; the maximum feasible ratio is " +
                                std::to_string(child / total));
  }
  std::sort(plan.groups.begin(), plan.groups.end(),
            [](const FoldGroup& a, const FoldGroup& b) { return a.parent < b.parent; });
  plan.realized_ratio = child / total;
  return plan;
}

nlohmann::json fold_plan_to_json(const FoldPlan& plan) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : plan.groups) {
    groups.push_back({{"parent", g.parent}, {"children", g.children}, {"similarity", g.similarity}});
  }
  return {{"removed", plan.removed},
          {"groups", groups},
          {"group_size", plan.group_size},
          {"requested_ratio", plan.requested_ratio},
          {"realized_ratio", plan.realized_ratio}};
}

FoldPlan fold_plan_from_json(const nlohmann::json& j) {
  FoldPlan plan;
  plan.removed = j.at("removed").get<std::vector<std::size_t>>();
  for (const auto& g : j.at("groups")) {
    plan.groups.push_back({g.at("parent").get<std::size_t>(),
                           g.at("children").get<std::vector<std::size_t>>(),
                           g.at("similarity").get<double>()});
  }
  plan.group_size = j.at("group_size").get<std::size_t>();
  plan.requested_ratio = j.at("requested_ratio").get<double>();
  plan.realized_ratio = j.at("realized_ratio").get<double>();
  return plan;
}

bool FoldedModel::is_parent(std::size_t k) const {
  return std::find(parent_storage.begin(), parent_storage.end(), k) != parent_storage.end();
}

FoldedModel apply_fold(const Model& model, const FoldPlan& plan, const FoldOptions& options) {
  const std::size_t L = model.blocks.size();
  const std::vector<std::size_t> kept = retained_blocks(L, plan.removed);
  if (kept.empty()) throw std::invalid_argument("apply_fold: every block is removed");
  std::map<std::size_t, std::size_t> position;  // original index -> retained position
  for (std::size_t p = 0; p < kept.size(); ++p) position[kept[p]] = p;

  // Role of each retained position: parent, child of a parent, or plain.
  std::map<std::size_t, std::size_t> parent_of;  // child original -> parent original
  std::set<std::size_t> parents;
  for (const auto& g : plan.groups) {
    if (g.children.empty()) throw std::invalid_argument("apply_fold: group without children");
    std::vector<std::size_t> members{g.parent};
    members.insert(members.end(), g.children.begin(), g.children.end());
    for (std::size_t m : members) {
      if (!position.contains(m)) {
        throw std::invalid_argument("apply_fold: group member " + std::to_string(m) +
                                    " is removed or does not exist");
      }
      if (parents.contains(m) || parent_of.contains(m)) {
        throw std::invalid_argument("apply_fold: block " + std::to_string(m) + " is in two groups");
      }
    }
    for (std::size_t i = 1; i < members.size(); ++i) {
      if (position[members[i]] != position[members[0]] + i) {
        throw std::invalid_argument("apply_fold: group of parent " + std::to_string(g.parent) +
                                    " is not consecutive in the retained order");
      }
    }
    parents.insert(g.parent);
    for (std::size_t c : g.children) parent_of[c] = g.parent;
  }

  FoldedModel f;
  f.config = model.config;
  f.config.n_layers = kept.size();
  f.tokenizer = model.tokenizer;
  f.token_embedding = model.token_embedding;
  f.position_embedding = model.position_embedding;
  f.final_norm = model.final_norm;
  f.lm_head = model.lm_head;
  f.has_bias = options.with_bias;
  f.plan = plan;
  std::map<std::size_t, std::size_t> storage_of;  // original parent -> storage index
  const auto outs = layer_outputs(model.config);
  for (std::size_t orig : kept) {
    const BlockWeights& w = model.blocks[orig];
    if (auto it = parent_of.find(orig); it != parent_of.end()) {
      ChildParams c;
      for (std::size_t l = 0; l < 4; ++l) {
        c.scales[l] = Tensor({outs[l]}, 1.0);
        if (options.with_bias) c.biases[l] = Tensor({outs[l]}, 0.0);
      }
      c.norm_attn = w.norm_attn;
      c.norm_ffn = w.norm_ffn;
      f.slots.push_back({storage_of.at(it->second), f.children.size(), orig});
      f.children.push_back(std::move(c));
    } else {
      const std::size_t k = f.storage.size();
      f.storage.push_back(w);
      if (parents.contains(orig)) {
        f.parent_storage.push_back(k);
        storage_of[orig] = k;
      }
      f.slots.push_back({k, std::nullopt, orig});
    }
  }
  return f;
}

NetworkRef network_view(const FoldedModel& f) {
  NetworkRef net;
  net.config = f.config;
  net.token_embedding = &f.token_embedding;
  net.position_embedding = &f.position_embedding;
  net.final_norm = &f.final_norm;
  net.lm_head = &f.lm_head;
  for (const FoldSlot& s : f.slots) {
    const std::string sp = "store" + std::to_string(s.storage);
    SlotRef ref = block_view(f.storage.at(s.storage), sp);
    const auto lit = std::find(f.parent_storage.begin(), f.parent_storage.end(), s.storage);
    if (f.lora_rank > 0 && lit != f.parent_storage.end()) {
      const auto& adapters = f.lora.at(static_cast<std::size_t>(lit - f.parent_storage.begin()));
      for (std::size_t l = 0; l < 4; ++l) {
        ref.dense[l].lora_down = &adapters[l].down;
        ref.dense[l].lora_up = &adapters[l].up;
        ref.dense[l].lora_name = sp + ".lora_" + kDenseNames[l];
      }
    }
    if (s.child) {
      const ChildParams& c = f.children.at(*s.child);
      const std::string cp = "child" + std::to_string(*s.child);
      for (std::size_t l = 0; l < 4; ++l) {
        ref.dense[l].scale = &c.scales[l];
        ref.dense[l].scale_name = cp + ".scale_" + kDenseNames[l];
        if (f.has_bias) {
          ref.dense[l].bias = &c.biases[l];
          ref.dense[l].bias_name = cp + ".bias_" + kDenseNames[l];
        }
      }
      ref.norm_attn = &c.norm_attn;
      ref.norm_attn_name = cp + ".norm_attn";
      ref.norm_ffn = &c.norm_ffn;
      ref.norm_ffn_name = cp + ".norm_ffn";
    }
    net.slots.push_back(std::move(ref));
  }
  return net;
}

Tensor child_dense_forward(const Tensor& x, const Tensor& weight, const Tensor& scale,
                           const Tensor* bias) {
  Tape tape;
  ParamBinder binder(tape, nullptr);
  DenseLayerRef layer;
  layer.weight = &weight;
  layer.weight_name = "w";
  layer.scale = &scale;
  layer.scale_name = "s";
  if (bias) {
    layer.bias = bias;
    layer.bias_name = "b";
  }
  return tape.value(dense_forward(binder, tape.constant_ref(x), layer));
}

Tensor folded_logits(const FoldedModel& folded, const Batch& batch) {
  Tape tape;
  return tape.value(build_forward(tape, network_view(folded), batch).logits);
}

const char* category_name(ParamCategory c) {
  switch (c) {
    case ParamCategory::SharedDense: return "dense";
    case ParamCategory::ChildScale: return "scale";
    case ParamCategory::Norm: return "norm";
    case ParamCategory::Bias: return "bias";
    case ParamCategory::Lora: return "lora";
    case ParamCategory::Embedding: return "embedding";
    case ParamCategory::Head: return "head";
  }
  return "?";
}

namespace {

using ParamVisitor =
    std::function<void(const std::string&, const Tensor&, ParamCategory, bool in_block)>;

template <class M>
void visit_dense(M& m, const ParamVisitor& fn) {
  fn("tok_emb", m.token_embedding, ParamCategory::Embedding, false);
  fn("pos_emb", m.position_embedding, ParamCategory::Embedding, false);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    const auto& b = m.blocks[i];
    fn(p + ".w_qkv", b.w_qkv, ParamCategory::SharedDense, true);
    fn(p + ".w_o", b.w_o, ParamCategory::SharedDense, true);
    fn(p + ".w_up", b.w_up, ParamCategory::SharedDense, true);
    fn(p + ".w_down", b.w_down, ParamCategory::SharedDense, true);
    fn(p + ".norm_attn", b.norm_attn, ParamCategory::Norm, true);
    fn(p + ".norm_ffn", b.norm_ffn, ParamCategory::Norm, true);
  }
  fn("final_norm", m.final_norm, ParamCategory::Norm, false);
  fn("lm_head", m.lm_head, ParamCategory::Head, false);
}

void visit_folded(const FoldedModel& f, const ParamVisitor& fn) {
  fn("tok_emb", f.token_embedding, ParamCategory::Embedding, false);
  fn("pos_emb", f.position_embedding, ParamCategory::Embedding, false);
  for (std::size_t k = 0; k < f.storage.size(); ++k) {
    const std::string p = "store" + std::to_string(k);
    const auto& b = f.storage[k];
    fn(p + ".w_qkv", b.w_qkv, ParamCategory::SharedDense, true);
    fn(p + ".w_o", b.w_o, ParamCategory::SharedDense, true);
    fn(p + ".w_up", b.w_up, ParamCategory::SharedDense, true);
    fn(p + ".w_down", b.w_down, ParamCategory::SharedDense, true);
    fn(p + ".norm_attn", b.norm_attn, ParamCategory::Norm, true);
    fn(p + ".norm_ffn", b.norm_ffn, ParamCategory::Norm, true);
  }
  if (f.lora_rank > 0) {
    for (std::size_t i = 0; i < f.parent_storage.size(); ++i) {
      const std::string p = "store" + std::to_string(f.parent_storage[i]) + ".lora_";
      for (std::size_t l = 0; l < 4; ++l) {
        fn(p + kDenseNames[l] + ".down", f.lora[i][l].down, ParamCategory::Lora, true);
        fn(p + kDenseNames[l] + ".up", f.lora[i][l].up, ParamCategory::Lora, true);
      }
    }
  }
  for (std::size_t c = 0; c < f.children.size(); ++c) {
    const std::string p = "child" + std::to_string(c);
    const auto& ch = f.children[c];
    for (std::size_t l = 0; l < 4; ++l) {
      fn(p + ".scale_" + kDenseNames[l], ch.scales[l], ParamCategory::ChildScale, true);
    }
    if (f.has_bias) {
      for (std::size_t l = 0; l < 4; ++l) {
        fn(p + ".bias_" + kDenseNames[l], ch.biases[l], ParamCategory::Bias, true);
      }
    }
    fn(p + ".norm_attn", ch.norm_attn, ParamCategory::Norm, true);
    fn(p + ".norm_ffn", ch.norm_ffn, ParamCategory::Norm, true);
  }
  fn("final_norm", f.final_norm, ParamCategory::Norm, false);
  fn("lm_head", f.lm_head, ParamCategory::Head, false);
}

ParamManifest build_manifest(const std::function<void(const ParamVisitor&)>& visit,
                             const std::unordered_set<std::string>* trainable) {
  ParamManifest m;
  visit([&](const std::string& name, const Tensor& t, ParamCategory c, bool in_block) {
    ParamEntry e{name, t.shape(), t.numel(), c, in_block, trainable && trainable->contains(name)};
    m.total += e.count;
    if (in_block) m.block_total += e.count;
    m.entries.push_back(std::move(e));
  });
  return m;
}

}  // namespace

std::size_t ParamManifest::by_category(ParamCategory c) const {
  std::size_t n = 0;
  for (const auto& e : entries) {
    if (e.category == c) n += e.count;
  }
  return n;
}

double ParamManifest::compression_vs(std::size_t dense_block_total) const {
  return 1.0 - static_cast<double>(block_total) / static_cast<double>(dense_block_total);
}

nlohmann::json ParamManifest::to_json() const {
  nlohmann::json entries_j = nlohmann::json::array();
  for (const auto& e : entries) {
    entries_j.push_back({{"name", e.name},
                         {"shape", e.shape},
                         {"count", e.count},
                         {"category", category_name(e.category)},
                         {"in_block", e.in_block},
                         {"trainable", e.trainable}});
  }
  nlohmann::json totals = nlohmann::json::object();
  for (auto c : {ParamCategory::SharedDense, ParamCategory::ChildScale, ParamCategory::Norm,
                 ParamCategory::Bias, ParamCategory::Lora, ParamCategory::Embedding,
                 ParamCategory::Head}) {
    totals[category_name(c)] = by_category(c);
  }
  return {{"entries", entries_j}, {"totals", totals}, {"total", total}, {"block_total", block_total}};
}

ParamManifest count_params(const Model& model, const std::unordered_set<std::string>* trainable) {
  return build_manifest([&](const ParamVisitor& fn) { visit_dense(model, fn); }, trainable);
}

ParamManifest count_params(const FoldedModel& folded,
                           const std::unordered_set<std::string>* trainable) {
  return build_manifest([&](const ParamVisitor& fn) { visit_folded(folded, fn); }, trainable);
}

std::vector<NamedTensor> named_parameters(FoldedModel& folded) {
  std::vector<NamedTensor> out;
  visit_folded(folded, [&](const std::string& name, const Tensor& t, ParamCategory, bool) {
    out.push_back({name, const_cast<Tensor*>(&t)});
  });
  return out;
}

TensorArchive folded_to_archive(const FoldedModel& f) {
  TensorArchive a;
  a.meta["kind"] = "folded";
  a.meta["config"] = config_to_json(f.config);
  a.meta["alphabet"] = f.tokenizer.alphabet();
  a.meta["has_bias"] = f.has_bias;
  a.meta["lora_rank"] = f.lora_rank;
  a.meta["parent_storage"] = f.parent_storage;
  a.meta["storage_count"] = f.storage.size();
  a.meta["child_count"] = f.children.size();
  a.meta["plan"] = fold_plan_to_json(f.plan);
  nlohmann::json bindings = nlohmann::json::array();
  for (std::size_t i = 0; i < f.slots.size(); ++i) {
    const FoldSlot& s = f.slots[i];
    bindings.push_back({{"slot", i},
                        {"original", s.original},
                        {"storage", s.storage},
                        {"child", s.child ? nlohmann::json(*s.child) : nlohmann::json(nullptr)}});
  }
  a.meta["bindings"] = bindings;
  visit_folded(f, [&](const std::string& name, const Tensor& t, ParamCategory, bool) {
    a.tensors.emplace_back(name, t);
  });
  return a;
}

FoldedModel folded_from_archive(const TensorArchive& a) {
  if (a.meta.value("kind", "") != "folded") throw FormatError("checkpoint: not a folded model");
  FoldedModel f;
  f.config = config_from_json(a.meta.at("config"));
  f.tokenizer = Tokenizer(a.meta.at("alphabet").get<std::vector<std::uint8_t>>());
  f.has_bias = a.meta.at("has_bias").get<bool>();
  f.lora_rank = a.meta.at("lora_rank").get<std::size_t>();
  f.parent_storage = a.meta.at("parent_storage").get<std::vector<std::size_t>>();
  f.plan = fold_plan_from_json(a.meta.at("plan"));
  const auto n_storage = a.meta.at("storage_count").get<std::size_t>();
  const auto n_child = a.meta.at("child_count").get<std::size_t>();
  for (const auto& b : a.meta.at("bindings")) {
    FoldSlot s;
    s.original = b.at("original").get<std::size_t>();
    s.storage = b.at("storage").get<std::size_t>();
    if (!b.at("child").is_null()) s.child = b.at("child").get<std::size_t>();
    if (s.storage >= n_storage || (s.child && *s.child >= n_child)) {
      throw FormatError("checkpoint: binding references missing storage");
    }
    f.slots.push_back(s);
  }
  if (f.slots.size() != f.config.n_layers) throw FormatError("checkpoint: slot count mismatch");
  const ModelConfig& c = f.config;
  const std::size_t d = c.d_model;
  auto take = [&](const std::string& name, const Shape& shape) {
    const Tensor& t = a.at(name);
    if (t.shape() != shape) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(shape));
    }
    return t;
  };
  f.token_embedding = take("tok_emb", {c.vocab_size, d});
  f.position_embedding = take("pos_emb", {c.max_seq, d});
  for (std::size_t k = 0; k < n_storage; ++k) {
    const std::string p = "store" + std::to_string(k);
    f.storage.push_back(BlockWeights{take(p + ".w_qkv", {d, 3 * d}), take(p + ".w_o", {d, d}),
                                     take(p + ".w_up", {d, c.d_ff}), take(p + ".w_down", {c.d_ff, d}),
                                     take(p + ".norm_attn", {d}), take(p + ".norm_ffn", {d})});
  }
  const auto ins = layer_inputs(c);
  const auto outs = layer_outputs(c);
  if (f.lora_rank > 0) {
    for (std::size_t k : f.parent_storage) {
      const std::string p = "store" + std::to_string(k) + ".lora_";
      std::array<LoraAdapter, 4> ad;
      for (std::size_t l = 0; l < 4; ++l) {
        ad[l].down = take(p + kDenseNames[l] + ".down", {ins[l], f.lora_rank});
        ad[l].up = take(p + kDenseNames[l] + ".up", {f.lora_rank, outs[l]});
      }
      f.lora.push_back(std::move(ad));
    }
  }
  for (std::size_t i = 0; i < n_child; ++i) {
    const std::string p = "child" + std::to_string(i);
    ChildParams ch;
    for (std::size_t l = 0; l < 4; ++l) {
      ch.scales[l] = take(p + ".scale_" + kDenseNames[l], {outs[l]});
      if (f.has_bias) ch.biases[l] = take(p + ".bias_" + kDenseNames[l], {outs[l]});
    }
    ch.norm_attn = take(p + ".norm_attn", {d});
    ch.norm_ffn = take(p + ".norm_ffn", {d});
    f.children.push_back(std::move(ch));
  }
  f.final_norm = take("final_norm", {d});
  f.lm_head = take("lm_head", {d, c.vocab_size});
  return f;
}

void save_folded(const std::string& path, const FoldedModel& folded) {
  write_archive(path, folded_to_archive(folded));
}

FoldedModel load_folded(const std::string& path) { return folded_from_archive(read_archive(path)); }

}  // namespace foldlab
