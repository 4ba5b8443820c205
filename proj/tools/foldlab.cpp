// SPDX-License-Identifier: Apache-2.0
// foldlab: run pipeline stages against a workdir.
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "foldlab/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Gated block removal, folding and recovery on a toy transformer."};
  app.require_subcommand(1);

  foldlab::CliRequest req;
  std::string config;
  std::uint64_t seed = 0;
  std::string workdir;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "Pipeline YAML config");
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--workdir", workdir, "Artifact directory (default: config, FOLDLAB_WORKDIR, ./work)");
    sub->add_option("--set", req.overrides, "Override a config entry, e.g. --set gate.steps=200")
        ->take_last()
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->add_flag("--force", req.force, "Rerun even when the stage manifest matches");
  };

  const std::map<std::string, std::string> about = {
      {"train-base", "Train the dense base model"},
      {"profile", "Hidden-state similarity and block influence"},
      {"gate-train", "Learn block gates under the resource penalty"},
      {"remove", "Drop the lowest-ranked blocks (gate and BI rankings)"},
      {"fold", "Share weights across the most similar retained blocks"},
      {"recover", "LoRA and distillation fine-tuning of the folded model"},
      {"eval", "Held-out perplexity of every model variant"},
      {"compare", "Side-by-side table against the dense baseline"},
      {"report", "Summarize a workdir (needs no config)"},
  };
  for (const auto& name : foldlab::pipeline_commands()) add_common(app.add_subcommand(name, about.at(name)));
  add_common(app.add_subcommand("all", "Run every stage in order"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? foldlab::kExitOk : foldlab::kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  req.command = sub->get_name();
  if (sub->count("--config")) req.config_path = config;
  if (sub->count("--seed")) req.seed = seed;
  if (sub->count("--workdir")) req.workdir = workdir;
  return foldlab::run_cli(req, std::cout, std::cerr);
}
