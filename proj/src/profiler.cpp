// SPDX-License-Identifier: Apache-2.0
#include "foldlab/profiler.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "foldlab/errors.hpp"

namespace foldlab {

double cosine(std::span<const double> u, std::span<const double> v, CosineCase* which) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine: lengths " + std::to_string(u.size()) + " and " +
                     std::to_string(v.size()) + " differ");
  }
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  const bool uz = uu == 0.0, vz = vv == 0.0;
  if (uz || vz) {
    if (which) *which = (uz && vz) ? CosineCase::BothZero : CosineCase::OneZero;
    return (uz && vz) ? 1.0 : 0.0;
  }
  if (which) *which = CosineCase::Regular;
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

const std::vector<double>& SimilarityProfile::group_from_start(std::size_t start) const {
  if (start >= group.size()) {
    throw std::out_of_range("profile: start " + std::to_string(start) + " outside [0, " +
                            std::to_string(group.size()) + ")");
  }
  return group[start];
}

SimilarityProfile profile_blocks(const Model& model, std::span<const Batch> batches) {
  if (batches.empty()) throw std::invalid_argument("profile: no batches");
  const std::size_t L = model.blocks.size();
  const std::size_t d = model.config.d_model;
  SimilarityProfile prof;
  prof.group.resize(L);
  for (std::size_t k = 0; k < L; ++k) prof.group[k].assign(L - k, 0.0);
  for (const Batch& batch : batches) {
    const CollectedForward fwd = forward_collect(model, batch);
    const std::size_t tokens = batch.rows * batch.seq;
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t k = 0; k < L; ++k) {
        const std::span<const double> xk = fwd.hidden[k].data().subspan(t * d, d);
        for (std::size_t j = k; j < L; ++j) {
          CosineCase c = CosineCase::Regular;
          prof.group[k][j - k] += cosine(xk, fwd.hidden[j + 1].data().subspan(t * d, d), &c);
          if (c != CosineCase::Regular) ++prof.zero_vector_pairs;
        }
      }
    }
    prof.sample_count += tokens;
  }
  if (prof.sample_count == 0) throw std::invalid_argument("profile: batches hold no tokens");
  const double n = static_cast<double>(prof.sample_count);
  for (auto& row : prof.group) {
    for (double& v : row) v /= n;
  }
  prof.per_block.resize(L);
  for (std::size_t k = 0; k < L; ++k) prof.per_block[k] = prof.group[k][0];
  if (prof.zero_vector_pairs > 0) {
    std::clog << "profile: " << prof.zero_vector_pairs
              << " token pairs involved a zero hidden vector\n";
  }
  return prof;
}

std::vector<double> profile_groups(const Model& model, std::span<const Batch> batches,
                                   std::size_t start) {
  if (start >= model.blocks.size()) {
    throw std::out_of_range("profile_groups: start " + std::to_string(start) +
                            " outside [0, " + std::to_string(model.blocks.size()) + ")");
  }
  return profile_blocks(model, batches).group_from_start(start);
}

std::vector<std::size_t> rank_ascending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return idx;
}

BIReport bi_from_profile(const SimilarityProfile& profile) {
  BIReport r;
  for (double c : profile.per_block) r.scores.push_back(1.0 - c);
  r.ranking = rank_ascending(r.scores);
  return r;
}

BIReport compute_bi(const Model& model, std::span<const Batch> batches) {
  return bi_from_profile(profile_blocks(model, batches));
}

std::string profile_csv(const SimilarityProfile& profile, std::span<const std::size_t> starts) {
  std::ostringstream os;
  os.precision(17);
  os << "block,cos_io,bi";
  for (std::size_t k : starts) {
    profile.group_from_start(k);
    os << ",group_from_" << k;
  }
  os << '\n';
  for (std::size_t j = 0; j < profile.n_blocks(); ++j) {
    os << j << ',' << profile.per_block[j] << ',' << 1.0 - profile.per_block[j];
    for (std::size_t k : starts) {
      os << ',';
      if (j >= k) os << profile.group[k][j - k];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace foldlab
