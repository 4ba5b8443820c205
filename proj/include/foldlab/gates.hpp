// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "foldlab/model.hpp"
#include "foldlab/tape.hpp"

namespace foldlab {

// eps = eps0 * decay^floor(step / interval)
struct GateSchedule {
  double eps0 = 0.1;
  double decay = 0.97;
  std::size_t interval = 120;

  void validate() const;
  double eps_at(std::size_t step) const;
};

// Two gate parameters per block: column 0 gates attention, column 1 the FFN.
struct GateSet {
  Tensor alpha;  // L x 2
  GateSchedule schedule;
  std::size_t step = 0;

  // alpha = sqrt(g0 / (1 - g0) * eps0), so every gate starts at g0.
  static GateSet init(std::size_t n_blocks, const GateSchedule& schedule, double g0 = 0.95);
  std::size_t n_blocks() const { return alpha.dim(0); }
  double eps() const { return schedule.eps_at(step); }
  double gate(std::size_t block, std::size_t which) const;
  std::vector<double> values() const;  // row-major L x 2
};

struct BlockFlops {
  double s_att = 0.0;
  double s_ffn = 0.0;
  double total() const { return s_att + s_ffn; }
};

// s_att = 8 s d^2 + 4 s^2 d, s_ffn = 4 s d d_ff; seq_len 0 means max_seq.
BlockFlops flops_of_block(const ModelConfig& config, std::size_t seq_len = 0);

// FLOPs-weighted mean of the two sub-module gates.
double block_score(double g_att, double g_ffn, const BlockFlops& flops);
std::vector<double> block_scores(const GateSet& gates, const BlockFlops& flops);

struct GateTrainConfig {
  // Unset: chosen so the penalty at initialization equals the initial task loss.
  std::optional<double> lambda_resource;
  std::size_t steps = 1000;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::size_t seq_len = 0;
  double init_gate = 0.95;
  GateSchedule schedule;
  GateGradient gradient = GateGradient::Analytic;
  std::uint64_t seed = 0;
};

struct GateTrajectory {
  std::vector<double> eps;
  std::vector<double> task_loss;
  std::vector<double> penalty;
  std::vector<std::vector<double>> gates;  // per step, row-major L x 2
};

struct RemovalReport {
  std::string method;
  std::vector<double> block_scores;
  std::vector<std::size_t> ranking;
  std::vector<std::size_t> removed;  // ascending block index
  double requested_ratio = 0.0;
  double realized_ratio = 0.0;
};

struct GateTrainResult {
  GateSet gates;
  double lambda_resource = 0.0;
  GateTrajectory trajectory;  // state before each step plus the final state
  RemovalReport importance;   // ranking only; nothing removed
};

// Trains only the gates on a frozen model. Throws std::invalid_argument for
// lambda < 0 and NumericalError with the step index on a non-finite loss.
GateTrainResult train_gates(const Model& model, std::span<const int> corpus,
                            const GateTrainConfig& config);

// Removes the lowest-score prefix of the ranking until the removed fraction
// of block parameters reaches `ratio`. Rejects ratios outside [0, 1) and
// ratios that would need every block removed.
RemovalReport plan_removal(std::span<const double> scores,
                           std::span<const std::size_t> block_params, double ratio,
                           std::string method);

struct PrunedModel {
  Model model;
  RemovalReport report;
};

PrunedModel rank_and_remove(const Model& model, const GateSet& gates, double ratio,
                            std::size_t seq_len = 0);
PrunedModel remove_by_scores(const Model& model, std::span<const double> scores, double ratio,
                             std::string method);

nlohmann::json removal_to_json(const RemovalReport& report);
RemovalReport removal_from_json(const nlohmann::json& j);
nlohmann::json gates_to_json(const GateSet& gates);
GateSet gates_from_json(const nlohmann::json& j);

// Columns: step, eps, task_loss, penalty, g<i>_att, g<i>_ffn ...
std::string trajectory_csv(const GateTrajectory& trajectory);

}  // namespace foldlab
