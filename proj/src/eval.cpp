// SPDX-License-Identifier: Apache-2.0
#include "foldlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "foldlab/errors.hpp"

namespace foldlab {

nlohmann::json EvalReport::to_json() const {
  return {{"model_id", model_id},     {"corpus_id", corpus_id},   {"seq_len", seq_len},
          {"window_count", window_count}, {"token_count", token_count}, {"mean_ce", mean_ce},
          {"perplexity", perplexity}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.model_id = j.at("model_id").get<std::string>();
  r.corpus_id = j.at("corpus_id").get<std::string>();
  r.seq_len = j.at("seq_len").get<std::size_t>();
  r.window_count = j.at("window_count").get<std::size_t>();
  r.token_count = j.at("token_count").get<std::size_t>();
  r.mean_ce = j.at("mean_ce").get<double>();
  r.perplexity = j.at("perplexity").get<double>();
  return r;
}

std::vector<double> token_nll(const Tensor& logits, std::span<const int> targets) {
  const std::size_t v = logits.last_dim();
  const std::size_t rows = logits.rows();
  if (targets.size() != rows) {
    throw ShapeError("token_nll: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  std::vector<double> out(rows);
  const auto z = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = z.subspan(r * v, v);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double x : row) total += std::exp(x - mx);
    const auto t = static_cast<std::size_t>(targets[r]);
    if (t >= v) throw std::out_of_range("token_nll: target " + std::to_string(t) + " out of range");
    out[r] = mx + std::log(total) - row[t];
  }
  return out;
}

EvalReport perplexity(const NetworkRef& net, std::span<const int> tokens, std::size_t seq_len,
                      const EvalOptions& options, std::string model_id, std::string corpus_id) {
  if (seq_len < 2) throw std::invalid_argument("perplexity: seq_len must be >= 2");
  if (seq_len > net.config.max_seq) {
    throw std::invalid_argument("perplexity: seq_len " + std::to_string(seq_len) +
                                " exceeds max_seq " + std::to_string(net.config.max_seq));
  }
  const std::vector<Batch> batches =
      window_batches(tokens, seq_len, options.rows_per_batch, options.max_windows);
  if (batches.empty()) {
    throw std::invalid_argument("perplexity: corpus of " + std::to_string(tokens.size()) +
                                " tokens holds no window of " + std::to_string(seq_len));
  }
  EvalReport r;
  r.model_id = std::move(model_id);
  r.corpus_id = std::move(corpus_id);
  r.seq_len = seq_len;
  double total = 0.0;
  for (const Batch& b : batches) {
    Tape tape;
    const Tensor& logits = tape.value(build_forward(tape, net, b).logits);
    for (double nll : token_nll(logits, b.targets)) total += nll;
    r.window_count += b.rows;
    r.token_count += b.targets.size();
  }
  r.mean_ce = total / static_cast<double>(r.token_count);
  r.perplexity = std::exp(r.mean_ce);
  if (!std::isfinite(r.perplexity)) {
    throw NumericalError("perplexity: non-finite result", 0);
  }
  return r;
}

EvalReport perplexity(const Model& model, std::span<const int> tokens, std::size_t seq_len,
                      const EvalOptions& options, std::string model_id, std::string corpus_id) {
  return perplexity(network_view(model), tokens, seq_len, options, std::move(model_id),
                    std::move(corpus_id));
}

EvalReport perplexity(const FoldedModel& model, std::span<const int> tokens, std::size_t seq_len,
                      const EvalOptions& options, std::string model_id, std::string corpus_id) {
  return perplexity(network_view(model), tokens, seq_len, options, std::move(model_id),
                    std::move(corpus_id));
}

CompareTable compare(std::span<const CompareEntry> entries, const std::string& baseline_id) {
  if (entries.size() < 2) throw std::invalid_argument("compare: need at least two reports");
  const auto base = std::find_if(entries.begin(), entries.end(), [&](const CompareEntry& e) {
    return e.report.model_id == baseline_id;
  });
  if (base == entries.end()) throw std::invalid_argument("compare: no report for baseline '" + baseline_id + "'");
  for (const auto& e : entries) {
    const EvalReport& r = e.report;
    if (r.corpus_id != base->report.corpus_id || r.seq_len != base->report.seq_len ||
        r.token_count != base->report.token_count) {
      throw std::invalid_argument("compare: report '" + r.model_id + "' was evaluated on corpus '" +
                                  r.corpus_id + "' (seq_len " + std::to_string(r.seq_len) +
                                  "), baseline on '" + base->report.corpus_id + "' (seq_len " +
                                  std::to_string(base->report.seq_len) + ")");
    }
  }
  CompareTable t;
  t.baseline_id = baseline_id;
  t.corpus_id = base->report.corpus_id;
  for (const auto& e : entries) {
    t.rows.push_back({e.report.model_id, e.method, e.removal_ratio, e.fold_ratio,
                      e.removal_ratio + e.fold_ratio, e.param_compression, e.report.perplexity,
                      100.0 * base->report.perplexity / e.report.perplexity});
  }
  std::stable_sort(t.rows.begin(), t.rows.end(), [](const CompareRow& a, const CompareRow& b) {
    return a.total_ratio > b.total_ratio;
  });
  return t;
}

std::string compare_csv(const CompareTable& t) {
  std::ostringstream os;
  os.precision(17);
  os << "model,method,removal_ratio,fold_ratio,total_ratio,param_compression,perplexity,retained_pct\n";
  for (const auto& r : t.rows) {
    os << r.model_id << ',' << r.method << ',' << r.removal_ratio << ',' << r.fold_ratio << ','
       << r.total_ratio << ',' << r.param_compression << ',' << r.perplexity << ','
       << r.retained_pct << '\n';
  }
  return os.str();
}

std::string compare_text(const CompareTable& t) {
  const std::vector<std::string> head = {"model", "method", "removed", "folded", "total",
                                         "params saved", "ppl", "retained"};
  std::vector<std::vector<std::string>> cells;
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * v);
    return std::string(buf);
  };
  for (const auto& r : t.rows) {
    char ppl[32], kept[32];
    std::snprintf(ppl, sizeof ppl, "%.4f", r.perplexity);
    std::snprintf(kept, sizeof kept, "%.2f%%", r.retained_pct);
    cells.push_back({r.model_id, r.method, pct(r.removal_ratio), pct(r.fold_ratio),
                     pct(r.total_ratio), pct(r.param_compression), ppl, kept});
  }
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) os << "  ";
      const std::string pad(width[c] - row[c].size(), ' ');
      // Text columns left-aligned, numbers right-aligned.
      os << (c < 2 ? row[c] + pad : pad + row[c]);
    }
    os << '\n';
  };
  os << "corpus: " << t.corpus_id << "  baseline: " << t.baseline_id << '\n';
  line(head);
  for (const auto& row : cells) line(row);
  return os.str();
}

}  // namespace foldlab
