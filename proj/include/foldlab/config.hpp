// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "foldlab/gates.hpp"
#include "foldlab/model.hpp"
#include "foldlab/recovery.hpp"
#include "foldlab/train.hpp"

namespace foldlab {

// Invalid configuration; `key` is the dotted path of the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::runtime_error(key.empty() ? what : key + ": " + what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct DataConfig {
  double held_in_fraction = 0.9;
  std::size_t max_vocab = 64;
};

struct ProfileConfig {
  std::size_t max_windows = 64;
  std::size_t rows_per_batch = 8;
  std::vector<std::size_t> starts = {0};
};

struct FoldConfig {
  double removal_ratio = 0.25;
  double fold_ratio = 0.08;
  std::size_t group_size = 2;
  bool with_bias = false;
};

struct EvalConfig {
  std::size_t seq_len = 0;  // 0 = model max_seq
  std::size_t max_windows = 0;
  std::size_t rows_per_batch = 16;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::string corpus;   // resolved against the config file's directory
  std::string workdir;  // empty: FOLDLAB_WORKDIR, then ./work
  DataConfig data;
  ModelConfig model;
  BaseTrainConfig train;
  ProfileConfig profile;
  GateTrainConfig gate;
  FoldConfig fold;
  RecoveryConfig recovery;
  EvalConfig eval;

  void validate() const;
  // Settings that influence each stage, as canonical JSON (config hashing).
  nlohmann::json section_json(const std::string& stage) const;
};

// Parses YAML text. Overrides are "dotted.key=value" with YAML scalar
// values, applied before validation. Unknown keys are errors.
PipelineConfig parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides = {},
                            const std::string& base_dir = ".");
PipelineConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

}  // namespace foldlab
