// SPDX-License-Identifier: Apache-2.0
#include "foldlab/gates.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "foldlab/errors.hpp"
#include "foldlab/network.hpp"
#include "foldlab/optim.hpp"
#include "foldlab/profiler.hpp"

namespace foldlab {

void GateSchedule::validate() const {
  if (!(eps0 > 0.0)) throw std::invalid_argument("gate schedule: eps0 must be > 0");
  if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("gate schedule: decay must be in (0, 1]");
  if (interval == 0) throw std::invalid_argument("gate schedule: interval must be >= 1");
}

double GateSchedule::eps_at(std::size_t step) const {
  return eps0 * std::pow(decay, static_cast<double>(step / interval));
}

GateSet GateSet::init(std::size_t n_blocks, const GateSchedule& schedule, double g0) {
  schedule.validate();
  if (!(g0 > 0.0 && g0 < 1.0)) throw std::invalid_argument("gates: initial gate must be in (0, 1)");
  GateSet g;
  g.schedule = schedule;
  g.alpha = Tensor({n_blocks, 2}, std::sqrt(g0 / (1.0 - g0) * schedule.eps0));
  return g;
}

double GateSet::gate(std::size_t block, std::size_t which) const {
  return gate_value(alpha[block * 2 + which], eps());
}

std::vector<double> GateSet::values() const {
  std::vector<double> out;
  for (double a : alpha.data()) out.push_back(gate_value(a, eps()));
  return out;
}

BlockFlops flops_of_block(const ModelConfig& c, std::size_t seq_len) {
  const double s = static_cast<double>(seq_len ? seq_len : c.max_seq);
  const double d = static_cast<double>(c.d_model);
  const double ff = static_cast<double>(c.d_ff);
  return {.s_att = 8.0 * s * d * d + 4.0 * s * s * d, .s_ffn = 4.0 * s * d * ff};
}

double block_score(double g_att, double g_ffn, const BlockFlops& f) {
  return (g_att * f.s_att + g_ffn * f.s_ffn) / f.total();
}

std::vector<double> block_scores(const GateSet& gates, const BlockFlops& flops) {
  std::vector<double> out;
  for (std::size_t i = 0; i < gates.n_blocks(); ++i) {
    out.push_back(block_score(gates.gate(i, 0), gates.gate(i, 1), flops));
  }
  return out;
}

namespace {

std::string gate_name(std::size_t block, std::size_t which) {
  return "gate" + std::to_string(block) + (which == 0 ? ".att" : ".ffn");
}

struct GatedLoss {
  Var task;
  Var penalty_raw;  // sum of g * flops, before lambda
};

GatedLoss gated_loss(Tape& tape, const NetworkRef& net, const Batch& batch,
                     std::span<const Tensor> alphas, double eps, GateGradient grad,
                     const BlockFlops& flops) {
  const std::size_t L = net.slots.size();
  std::vector<GateVars> gv(L);
  Var penalty{};
  for (std::size_t i = 0; i < L; ++i) {
    gv[i].att = tape.gate(tape.parameter(gate_name(i, 0), alphas[2 * i]), eps, grad);
    gv[i].ffn = tape.gate(tape.parameter(gate_name(i, 1), alphas[2 * i + 1]), eps, grad);
    const Var term = tape.add(tape.scale(gv[i].att, flops.s_att), tape.scale(gv[i].ffn, flops.s_ffn));
    penalty = i == 0 ? term : tape.add(penalty, term);
  }
  ForwardOptions opts;
  opts.gates = gv;
  const ForwardGraph g = build_forward(tape, net, batch, opts);
  return {tape.cross_entropy(g.logits, batch.targets), penalty};
}

}  // namespace

GateTrainResult train_gates(const Model& model, std::span<const int> corpus,
                            const GateTrainConfig& config) {
  if (config.lambda_resource && !(*config.lambda_resource >= 0.0)) {
    throw std::invalid_argument("train_gates: lambda_resource must be >= 0");
  }
  const std::size_t seq = config.seq_len ? config.seq_len : model.config.max_seq;
  if (corpus.size() < seq + 1) throw std::invalid_argument("train_gates: corpus too small");
  const std::size_t L = model.blocks.size();
  const BlockFlops flops = flops_of_block(model.config, seq);
  const NetworkRef net = network_view(model);

  GateTrainResult result;
  result.gates = GateSet::init(L, config.schedule, config.init_gate);
  std::vector<Tensor> alphas(2 * L);
  std::vector<NamedTensor> params;
  for (std::size_t i = 0; i < 2 * L; ++i) {
    alphas[i] = Tensor::scalar(result.gates.alpha[i]);
    params.push_back({gate_name(i / 2, i % 2), &alphas[i]});
  }
  const auto sync = [&] {
    for (std::size_t i = 0; i < 2 * L; ++i) result.gates.alpha[i] = alphas[i].item();
  };

  std::mt19937_64 rng(config.seed);
  SgdMomentum opt(config.momentum);
  std::optional<double> lambda = config.lambda_resource;
  GateTrajectory& traj = result.trajectory;
  for (std::size_t step = 0; step <= config.steps; ++step) {
    const double eps = config.schedule.eps_at(step);
    const Batch batch = sample_batch(corpus, config.batch_size, seq, rng);
    Tape tape;
    const GatedLoss parts = gated_loss(tape, net, batch, alphas, eps, config.gradient, flops);
    const double task = tape.value(parts.task).item();
    const double raw = tape.value(parts.penalty_raw).item();
    if (!std::isfinite(task)) {
      throw NumericalError("train_gates: non-finite loss at step " + std::to_string(step), step);
    }
    if (!lambda) lambda = raw > 0.0 ? task / raw : 0.0;
    traj.eps.push_back(eps);
    traj.task_loss.push_back(task);
    traj.penalty.push_back(*lambda * raw);
    std::vector<double> g;
    for (const Tensor& a : alphas) g.push_back(gate_value(a.item(), eps));
    traj.gates.push_back(std::move(g));
    if (step == config.steps) break;  // the last row records the final state

    const Var loss = tape.add(parts.task, tape.scale(parts.penalty_raw, *lambda));
    opt.step(params, tape.backward(loss), config.lr);
    for (const Tensor& a : alphas) {
      if (!std::isfinite(a.item())) {
        throw NumericalError("train_gates: non-finite gate parameter at step " + std::to_string(step), step);
      }
    }
  }
  sync();
  result.gates.step = config.steps;
  result.lambda_resource = *lambda;
  result.importance.method = "gate";
  result.importance.block_scores = block_scores(result.gates, flops);
  result.importance.ranking = rank_ascending(result.importance.block_scores);
  return result;
}

RemovalReport plan_removal(std::span<const double> scores,
                           std::span<const std::size_t> block_params, double ratio,
                           std::string method) {
  if (scores.size() != block_params.size() || scores.empty()) {
    throw std::invalid_argument("plan_removal: need one score and parameter count per block");
  }
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("plan_removal: ratio " + std::to_string(ratio) + " outside [0, 1)");
  }
  RemovalReport r;
  r.method = std::move(method);
  r.block_scores.assign(scores.begin(), scores.end());
  r.ranking = rank_ascending(scores);
  r.requested_ratio = ratio;
  double total = 0.0;
  for (auto p : block_params) total += static_cast<double>(p);
  double removed = 0.0;
  std::size_t n = 0;
  while (removed / total < ratio) {
    if (n + 1 >= scores.size()) {
      double keep_one = 0.0;
      for (std::size_t i = 0; i + 1 < r.ranking.size(); ++i) {
        keep_one += static_cast<double>(block_params[r.ranking[i]]);
      }
      throw std::invalid_argument("plan_removal: ratio " + std::to_string(ratio) +
                                  " would remove every block; maximum is " +
                                  std::to_string(keep_one / total));
    }
    removed += static_cast<double>(block_params[r.ranking[n]]);
    ++n;
  }
  r.removed.assign(r.ranking.begin(), r.ranking.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(r.removed.begin(), r.removed.end());
  r.realized_ratio = removed / total;
  return r;
}

PrunedModel remove_by_scores(const Model& model, std::span<const double> scores, double ratio,
                             std::string method) {
  std::vector<std::size_t> params;
  for (const auto& b : model.blocks) params.push_back(b.param_count());
  PrunedModel out;
  out.report = plan_removal(scores, params, ratio, std::move(method));
  out.model = out.report.removed.empty() ? model : remove_blocks(model, out.report.removed);
  return out;
}

PrunedModel rank_and_remove(const Model& model, const GateSet& gates, double ratio,
                            std::size_t seq_len) {
  if (gates.n_blocks() != model.blocks.size()) {
    throw std::invalid_argument("rank_and_remove: gate set has " + std::to_string(gates.n_blocks()) +
                                " blocks, model has " + std::to_string(model.blocks.size()));
  }
  const auto scores = block_scores(gates, flops_of_block(model.config, seq_len));
  return remove_by_scores(model, scores, ratio, "gate");
}

nlohmann::json removal_to_json(const RemovalReport& r) {
  return {{"method", r.method},
          {"block_scores", r.block_scores},
          {"ranking", r.ranking},
          {"removed", r.removed},
          {"requested_ratio", r.requested_ratio},
          {"realized_ratio", r.realized_ratio}};
}

RemovalReport removal_from_json(const nlohmann::json& j) {
  RemovalReport r;
  r.method = j.at("method").get<std::string>();
  r.block_scores = j.at("block_scores").get<std::vector<double>>();
  r.ranking = j.at("ranking").get<std::vector<std::size_t>>();
  r.removed = j.at("removed").get<std::vector<std::size_t>>();
  r.requested_ratio = j.at("requested_ratio").get<double>();
  r.realized_ratio = j.at("realized_ratio").get<double>();
  return r;
}

nlohmann::json gates_to_json(const GateSet& g) {
  return {{"alpha", std::vector<double>(g.alpha.data().begin(), g.alpha.data().end())},
          {"n_blocks", g.n_blocks()},
          {"eps0", g.schedule.eps0},
          {"decay", g.schedule.decay},
          {"interval", g.schedule.interval},
          {"step", g.step},
          {"eps", g.eps()},
          {"gates", g.values()}};
}

GateSet gates_from_json(const nlohmann::json& j) {
  GateSet g;
  g.schedule.eps0 = j.at("eps0").get<double>();
  g.schedule.decay = j.at("decay").get<double>();
  g.schedule.interval = j.at("interval").get<std::size_t>();
  g.schedule.validate();
  g.step = j.at("step").get<std::size_t>();
  const std::size_t L = j.at("n_blocks").get<std::size_t>();
  g.alpha = Tensor({L, 2}, j.at("alpha").get<std::vector<double>>());
  return g;
}

std::string trajectory_csv(const GateTrajectory& t) {
  std::ostringstream os;
  os.precision(17);
  os << "step,eps,task_loss,penalty";
  const std::size_t n = t.gates.empty() ? 0 : t.gates.front().size();
  for (std::size_t i = 0; i < n; ++i) os << ",g" << i / 2 << (i % 2 == 0 ? "_att" : "_ffn");
  os << '\n';
  for (std::size_t s = 0; s < t.gates.size(); ++s) {
    os << s << ',' << t.eps[s] << ',' << t.task_loss[s] << ',' << t.penalty[s];
    for (double g : t.gates[s]) os << ',' << g;
    os << '\n';
  }
  return os.str();
}

}  // namespace foldlab
