// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace foldlab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumerical = 2;

// Stage commands in pipeline order, then "compare" and "report".
const std::vector<std::string>& pipeline_commands();

struct CliRequest {
  std::string command;  // one of pipeline_commands() or "all"
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> workdir;
  bool force = false;
  std::vector<std::string> overrides;  // key=value
};

// Runs one command against a workdir holding one directory per stage, each
// with a manifest.json recording the stage config hash, seed and SHA-256 of
// every input and output. A stage whose manifest matches is skipped unless
// forced. Returns kExitOk, kExitUsage (usage, config or missing upstream
// artifact) or kExitNumerical.
int run_cli(const CliRequest& request, std::ostream& out, std::ostream& err);

// Mixes a stage name into the run seed so stages draw independent streams.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& stage);

}  // namespace foldlab
