// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "foldlab/model.hpp"

namespace foldlab {

enum class CosineCase { Regular, BothZero, OneZero };

// u.v / (|u||v|). Two zero vectors count as identical (1), exactly one zero
// vector as orthogonal (0). The result is clamped to [-1, 1].
double cosine(std::span<const double> u, std::span<const double> v, CosineCase* which = nullptr);

struct SimilarityProfile {
  // per_block[i] = mean token cosine of X^i and X^{i+1}.
  std::vector<double> per_block;
  // group[k][j - k] = mean token cosine of X^k and X^{j+1}, for j >= k.
  std::vector<std::vector<double>> group;
  std::size_t sample_count = 0;
  std::size_t zero_vector_pairs = 0;

  std::size_t n_blocks() const { return per_block.size(); }
  const std::vector<double>& group_from_start(std::size_t start) const;
};

// Mean over every (row, position) of every batch. Rejects an empty batch set.
SimilarityProfile profile_blocks(const Model& model, std::span<const Batch> batches);
std::vector<double> profile_groups(const Model& model, std::span<const Batch> batches,
                                   std::size_t start);

struct BIReport {
  std::vector<double> scores;        // 1 - cos_io
  std::vector<std::size_t> ranking;  // least important first
};

BIReport bi_from_profile(const SimilarityProfile& profile);
BIReport compute_bi(const Model& model, std::span<const Batch> batches);

// Indices sorted by ascending score; equal scores keep the lower index first.
std::vector<std::size_t> rank_ascending(std::span<const double> scores);

// Columns: block, cos_io, bi, then group_from_<k> for each requested start
// (empty cells where j < k).
std::string profile_csv(const SimilarityProfile& profile, std::span<const std::size_t> starts);

}  // namespace foldlab
