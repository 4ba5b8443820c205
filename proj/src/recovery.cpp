// SPDX-License-Identifier: Apache-2.0
#include "foldlab/recovery.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "foldlab/errors.hpp"

namespace foldlab {

void attach_lora(FoldedModel& f, std::size_t rank, std::uint64_t seed, double init_std) {
  const ModelConfig& c = f.config;
  const std::size_t smallest = std::min(c.d_model, c.d_ff);
  if (rank == 0 || rank >= smallest) {
    throw std::invalid_argument("attach_lora: rank " + std::to_string(rank) +
                                " must be in [1, " + std::to_string(smallest) + ")");
  }
  const std::array<std::size_t, 4> ins = {c.d_model, c.d_model, c.d_model, c.d_ff};
  const std::array<std::size_t, 4> outs = {3 * c.d_model, c.d_model, c.d_ff, c.d_model};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, init_std);
  f.lora.clear();
  for (std::size_t i = 0; i < f.parent_storage.size(); ++i) {
    std::array<LoraAdapter, 4> ad;
    for (std::size_t l = 0; l < 4; ++l) {
      ad[l].down = Tensor({ins[l], rank}, 0.0);
      for (double& v : ad[l].down.data()) v = normal(rng);
      ad[l].up = Tensor({rank, outs[l]}, 0.0);
    }
    f.lora.push_back(std::move(ad));
  }
  f.lora_rank = rank;
}

namespace {

Var value_relation(Tape& tape, Var values) {
  const double dh = static_cast<double>(tape.value(values).last_dim());
  const Var scores = tape.scale(tape.bmm(values, values, true), 1.0 / std::sqrt(dh));
  return tape.softmax(tape.causal_mask(scores));
}

}  // namespace

DistillSignals distill_signals(const NetworkRef& net, const Batch& batch) {
  Tape tape;
  ForwardOptions opts;
  opts.probe_last_block = true;
  const ForwardGraph g = build_forward(tape, net, batch, opts);
  return {tape.value(g.last_block.probs), tape.value(value_relation(tape, g.last_block.values))};
}

DistillLosses distill_losses(const NetworkRef& teacher, const NetworkRef& student,
                             const Batch& batch) {
  const DistillSignals t = distill_signals(teacher, batch);
  const DistillSignals s = distill_signals(student, batch);
  if (t.probs.shape() != s.probs.shape()) {
    throw ShapeError("distill: teacher signals " + shape_str(t.probs.shape()) +
                     " do not match student signals " + shape_str(s.probs.shape()));
  }
  return {kl_divergence_rows(t.probs, s.probs), kl_divergence_rows(t.relation, s.relation)};
}

TrainableManifest select_trainable(const FoldedModel& folded, bool train_child_norms) {
  TrainableManifest m;
  const ParamManifest all = count_params(folded);
  for (const ParamEntry& e : all.entries) {
    const bool child_norm = e.category == ParamCategory::Norm && e.name.starts_with("child");
    const bool train = e.category == ParamCategory::Lora || e.category == ParamCategory::ChildScale ||
                       (child_norm && train_child_norms);
    (train ? m.trainable : m.frozen).push_back(e.name);
    (train ? m.trainable_count : m.frozen_count) += e.count;
  }
  return m;
}

void RecoveryConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("recovery: lr must be > 0");
  if (epochs == 0) throw std::invalid_argument("recovery: epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("recovery: batch_size must be >= 1");
  if (!(lambda_distill >= 0.0)) throw std::invalid_argument("recovery: lambda_distill must be >= 0");
  if (lora_rank == 0) throw std::invalid_argument("recovery: lora_rank must be >= 1");
}

namespace {

Batch stack_rows(std::span<const Batch> windows, std::span<const std::size_t> order) {
  Batch b{order.size(), windows[order[0]].seq, {}, {}};
  for (std::size_t i : order) {
    b.inputs.insert(b.inputs.end(), windows[i].inputs.begin(), windows[i].inputs.end());
    b.targets.insert(b.targets.end(), windows[i].targets.begin(), windows[i].targets.end());
  }
  return b;
}

}  // namespace

RecoveryResult recover_train(FoldedModel student, const Model& teacher,
                             std::span<const int> train_tokens, std::span<const int> eval_tokens,
                             const RecoveryConfig& config) {
  config.validate();
  if (teacher.config.d_model != student.config.d_model ||
      teacher.config.n_heads != student.config.n_heads) {
    throw ShapeError("recovery: teacher and student differ in width or head count");
  }
  if (student.lora_rank == 0 && !student.parent_storage.empty()) {
    attach_lora(student, config.lora_rank, config.seed);
  }
  const std::size_t window = config.seq_len ? config.seq_len : student.config.max_seq + 1;
  const std::size_t eval_window = config.eval_seq_len ? config.eval_seq_len : student.config.max_seq;
  const EvalOptions eval_opts{.max_windows = config.eval_max_windows};

  RecoveryResult result;
  result.before = perplexity(student, eval_tokens, eval_window, eval_opts, "student", "held_out");
  const TrainableManifest manifest = select_trainable(student, config.train_child_norms);
  const std::unordered_set<std::string> trainable = manifest.trainable_set();
  std::vector<NamedTensor> params;
  for (const NamedTensor& p : named_parameters(student)) {
    if (trainable.contains(p.name)) params.push_back(p);
  }

  if (!params.empty()) {
    const std::vector<Batch> windows = window_batches(train_tokens, window, 1, config.max_windows);
    if (windows.empty()) throw std::invalid_argument("recovery: training corpus holds no window");
    const NetworkRef teacher_net = network_view(teacher);
    const NetworkRef net = network_view(student);
    ForwardOptions opts;
    opts.trainable = &trainable;
    opts.probe_last_block = config.lambda_distill > 0.0;
    AdamW opt(config.adamw);
    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(windows.size());
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t at = 0; at < order.size(); at += config.batch_size, ++step) {
        const std::size_t n = std::min(config.batch_size, order.size() - at);
        const Batch batch = stack_rows(windows, std::span(order).subspan(at, n));
        Tape tape;
        const ForwardGraph g = build_forward(tape, net, batch, opts);
        Var loss = tape.cross_entropy(g.logits, batch.targets);
        RecoveryStep rec{.step = step, .ce_loss = tape.value(loss).item()};
        if (config.lambda_distill > 0.0) {
          const DistillSignals t = distill_signals(teacher_net, batch);
          const Var l_at = tape.kl_div(t.probs, g.last_block.probs);
          const Var l_vr = tape.kl_div(t.relation, value_relation(tape, g.last_block.values));
          rec.l_at = tape.value(l_at).item();
          rec.l_vr = tape.value(l_vr).item();
          loss = tape.add(loss, tape.scale(tape.add(l_at, l_vr), config.lambda_distill));
        }
        const double total = tape.value(loss).item();
        if (!std::isfinite(total)) {
          throw NumericalError("recovery: non-finite loss at step " + std::to_string(step), step);
        }
        const double warm = config.warmup_steps
                                ? std::min(1.0, static_cast<double>(step + 1) /
                                                    static_cast<double>(config.warmup_steps))
                                : 1.0;
        rec.lr = config.lr * warm;
        opt.step(params, tape.backward(loss), rec.lr);
        result.trace.push_back(rec);
      }
    }
  }
  result.after = perplexity(student, eval_tokens, eval_window, eval_opts, "student", "held_out");
  result.model = std::move(student);
  return result;
}

std::string recovery_trace_csv(std::span<const RecoveryStep> trace) {
  std::ostringstream os;
  os.precision(17);
  os << "step,ce_loss,l_at,l_vr,lr\n";
  for (const auto& r : trace) {
    os << r.step << ',' << r.ce_loss << ',' << r.l_at << ',' << r.l_vr << ',' << r.lr << '\n';
  }
  return os.str();
}

}  // namespace foldlab
