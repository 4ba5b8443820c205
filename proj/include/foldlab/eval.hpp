// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "foldlab/fold.hpp"
#include "foldlab/network.hpp"

namespace foldlab {

struct EvalOptions {
  std::size_t rows_per_batch = 16;
  std::size_t max_windows = 0;  // 0 = every full window
};

struct EvalReport {
  std::string model_id;
  std::string corpus_id;
  std::size_t seq_len = 0;
  std::size_t window_count = 0;
  std::size_t token_count = 0;  // scored predictions
  double mean_ce = 0.0;
  double perplexity = 0.0;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

// Negative log-likelihood of each target under logits [rows, seq, V].
std::vector<double> token_nll(const Tensor& logits, std::span<const int> targets);

// exp(mean next-token cross-entropy) over non-overlapping windows of seq_len
// tokens; each window scores its last seq_len - 1 tokens. A trailing partial
// window is dropped; an empty window set is rejected.
EvalReport perplexity(const NetworkRef& net, std::span<const int> tokens, std::size_t seq_len,
                      const EvalOptions& options = {}, std::string model_id = {},
                      std::string corpus_id = {});
EvalReport perplexity(const Model& model, std::span<const int> tokens, std::size_t seq_len,
                      const EvalOptions& options = {}, std::string model_id = {},
                      std::string corpus_id = {});
EvalReport perplexity(const FoldedModel& model, std::span<const int> tokens, std::size_t seq_len,
                      const EvalOptions& options = {}, std::string model_id = {},
                      std::string corpus_id = {});

struct CompareEntry {
  EvalReport report;
  std::string method;
  double removal_ratio = 0.0;
  double fold_ratio = 0.0;
  double param_compression = 0.0;  // from count_params, relative to the dense blocks
};

struct CompareRow {
  std::string model_id;
  std::string method;
  double removal_ratio = 0.0;
  double fold_ratio = 0.0;
  double total_ratio = 0.0;
  double param_compression = 0.0;
  double perplexity = 0.0;
  double retained_pct = 0.0;  // 100 * baseline ppl / row ppl
};

struct CompareTable {
  std::string baseline_id;
  std::string corpus_id;
  std::vector<CompareRow> rows;  // total_ratio descending, input order on ties
};

// Rejects fewer than two entries, a missing baseline and entries evaluated on
// different corpora or window settings.
CompareTable compare(std::span<const CompareEntry> entries, const std::string& baseline_id);
std::string compare_csv(const CompareTable& table);
std::string compare_text(const CompareTable& table);

}  // namespace foldlab
