// SPDX-License-Identifier: Apache-2.0
#include "foldlab/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "foldlab/errors.hpp"

namespace foldlab {

Tokenizer::Tokenizer(std::vector<std::uint8_t> alphabet) : alphabet_(std::move(alphabet)) {
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    if (lookup_[alphabet_[i]] != 0) throw FormatError("tokenizer: duplicate byte in alphabet");
    lookup_[alphabet_[i]] = static_cast<int>(i + 1);
  }
}

Tokenizer Tokenizer::from_text(std::string_view text, std::size_t max_vocab) {
  if (max_vocab < 2) throw std::invalid_argument("tokenizer: max_vocab must be >= 2");
  std::array<std::size_t, 256> counts{};
  for (unsigned char c : text) ++counts[c];
  std::vector<std::uint8_t> bytes;
  for (int b = 0; b < 256; ++b) {
    if (counts[b]) bytes.push_back(static_cast<std::uint8_t>(b));
  }
  if (bytes.size() > max_vocab - 1) {
    std::stable_sort(bytes.begin(), bytes.end(),
                     [&](std::uint8_t a, std::uint8_t b) { return counts[a] > counts[b]; });
    bytes.resize(max_vocab - 1);
  }
  std::sort(bytes.begin(), bytes.end());
  return Tokenizer(std::move(bytes));
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(lookup_[c]);
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id <= 0 || static_cast<std::size_t>(id) > alphabet_.size()) {
      out.push_back('?');
    } else {
      out.push_back(static_cast<char>(alphabet_[static_cast<std::size_t>(id) - 1]));
    }
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CorpusSplit split_corpus(std::span<const int> tokens, double held_in_fraction) {
  if (!(held_in_fraction > 0.0 && held_in_fraction < 1.0)) {
    throw std::invalid_argument("split_corpus: fraction must be in (0, 1)");
  }
  const auto cut = static_cast<std::size_t>(static_cast<double>(tokens.size()) * held_in_fraction);
  CorpusSplit split;
  split.held_in.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(cut));
  split.held_out.assign(tokens.begin() + static_cast<std::ptrdiff_t>(cut), tokens.end());
  return split;
}

Batch sample_batch(std::span<const int> tokens, std::size_t rows, std::size_t seq,
                   std::mt19937_64& rng) {
  if (tokens.size() < seq + 1) {
    throw std::invalid_argument("sample_batch: corpus has " + std::to_string(tokens.size()) +
                                " tokens, need at least " + std::to_string(seq + 1));
  }
  const std::size_t span = tokens.size() - seq;
  Batch b{rows, seq, {}, {}};
  b.inputs.reserve(rows * seq);
  b.targets.reserve(rows * seq);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t start = static_cast<std::size_t>(rng() % span);
    for (std::size_t t = 0; t < seq; ++t) {
      b.inputs.push_back(tokens[start + t]);
      b.targets.push_back(tokens[start + t + 1]);
    }
  }
  return b;
}

std::vector<Batch> window_batches(std::span<const int> tokens, std::size_t window,
                                  std::size_t rows_per_batch, std::size_t max_windows) {
  if (window < 2) throw std::invalid_argument("window_batches: window must be >= 2");
  if (rows_per_batch == 0) throw std::invalid_argument("window_batches: rows_per_batch is 0");
  std::size_t count = tokens.size() / window;
  if (max_windows) count = std::min(count, max_windows);
  std::vector<Batch> out;
  for (std::size_t w = 0; w < count; w += rows_per_batch) {
    const std::size_t rows = std::min(rows_per_batch, count - w);
    Batch b{rows, window - 1, {}, {}};
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t start = (w + r) * window;
      for (std::size_t t = 0; t + 1 < window; ++t) {
        b.inputs.push_back(tokens[start + t]);
        b.targets.push_back(tokens[start + t + 1]);
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace foldlab
