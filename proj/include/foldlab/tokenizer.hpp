// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace foldlab {

// Byte-level tokenizer. Id 0 is the unknown token; ids 1.. map to bytes of
// the alphabet, most frequent bytes first when the corpus has more distinct
// bytes than fit.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::uint8_t> alphabet);

  static Tokenizer from_text(std::string_view text, std::size_t max_vocab);

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;
  std::size_t vocab_size() const noexcept { return alphabet_.size() + 1; }
  const std::vector<std::uint8_t>& alphabet() const noexcept { return alphabet_; }

 private:
  std::vector<std::uint8_t> alphabet_;
  std::vector<int> lookup_ = std::vector<int>(256, 0);
};

// rows x seq next-token prediction problem: targets[i] follows inputs[i].
struct Batch {
  std::size_t rows = 0;
  std::size_t seq = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
};

struct CorpusSplit {
  std::vector<int> held_in;
  std::vector<int> held_out;
};

std::string read_text_file(const std::string& path);

// First `held_in_fraction` of the tokens train; the rest is held out.
CorpusSplit split_corpus(std::span<const int> tokens, double held_in_fraction);

// Random windows of seq+1 tokens.
Batch sample_batch(std::span<const int> tokens, std::size_t rows, std::size_t seq,
                   std::mt19937_64& rng);

// Non-overlapping windows of `window` tokens, each predicting its own tokens
// 1..window-1; a trailing partial window is dropped. At most `max_windows`
// windows when nonzero.
std::vector<Batch> window_batches(std::span<const int> tokens, std::size_t window,
                                  std::size_t rows_per_batch, std::size_t max_windows = 0);

}  // namespace foldlab
