// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "foldlab/config.hpp"
#include "foldlab/pipeline.hpp"

using namespace foldlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kSource = FOLDLAB_SOURCE_DIR;

std::string smoke_config() { return (kSource / "configs" / "smoke.yaml").string(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t line_count(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

// A fresh directory under the system temp dir, removed on scope exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("foldlab_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::string& cmd, const fs::path& workdir, std::vector<std::string> overrides = {},
        std::optional<std::uint64_t> seed = std::nullopt, bool with_config = true) {
  CliRequest req;
  req.command = cmd;
  if (with_config) req.config_path = smoke_config();
  req.workdir = workdir.string();
  req.seed = seed;
  req.overrides = std::move(overrides);
  std::ostringstream out, err;
  const int code = run_cli(req, out, err);
  return {code, out.str(), err.str()};
}

const char* kMinimal = "paths:\n  corpus: corpus.txt\n";

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("defaults and relative paths") {
    const PipelineConfig c = parse_config(kMinimal, {}, "/data/run");
    CHECK(c.corpus == "/data/run/corpus.txt");
    CHECK(c.fold.removal_ratio == 0.25);
    CHECK(!c.gate.lambda_resource.has_value());
    CHECK(c.gate.gradient == GateGradient::Analytic);
  }
  SUBCASE("unknown keys name their path") {
    try {
      parse_config(std::string(kMinimal) + "gate:\n  lamda: 3\n");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.key() == "gate.lamda");
    }
    CHECK_THROWS_AS(parse_config(std::string(kMinimal) + "colour: red\n"), ConfigError);
  }
  SUBCASE("overrides apply before validation") {
    const PipelineConfig c = parse_config(kMinimal, {"fold.removal_ratio=0.5", "model.n_layers=6", "seed=9"});
    CHECK(c.fold.removal_ratio == 0.5);
    CHECK(c.model.n_layers == 6);
    CHECK(c.seed == 9);
    CHECK_THROWS_AS(parse_config(kMinimal, {"fold.removal_ratio"}), ConfigError);
    CHECK_THROWS_AS(parse_config(kMinimal, {"fold..x=1"}), ConfigError);
    CHECK_THROWS_AS(parse_config(kMinimal, {"fold.bogus=1"}), ConfigError);
  }
  SUBCASE("lambda and gradient forms") {
    CHECK(*parse_config(kMinimal, {"gate.lambda_resource=0.002"}).gate.lambda_resource == 0.002);
    CHECK(!parse_config(kMinimal, {"gate.lambda_resource=auto"}).gate.lambda_resource);
    CHECK(!parse_config(kMinimal, {"gate.lambda_resource=null"}).gate.lambda_resource);
    CHECK(parse_config(kMinimal, {"gate.gradient=printed"}).gate.gradient == GateGradient::Printed);
    CHECK_THROWS_AS(parse_config(kMinimal, {"gate.gradient=exact"}), ConfigError);
  }
  SUBCASE("validation names the offending key") {
    const std::vector<std::pair<std::string, std::string>> bad = {
        {"fold.removal_ratio=1.0", "fold.removal_ratio"},
        {"model.n_heads=3", "model.n_heads"},
        {"eval.seq_len=1000", "eval.seq_len"},
        {"profile.starts=[40]", "profile.starts"},
        {"gate.init_gate=1.0", "gate.init_gate"},
        {"fold.group_size=1", "fold.group_size"},
    };
    for (const auto& [o, key] : bad) {
      CAPTURE(o);
      try {
        parse_config(kMinimal, {o});
        FAIL("expected ConfigError");
      } catch (const ConfigError& e) {
        CHECK(e.key() == key);
      }
    }
    CHECK_THROWS_AS(parse_config("model: [1, 2]\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("{"), ConfigError);
  }
}

TEST_CASE("stage seeds") {
  CHECK(derive_seed(1, "init") == derive_seed(1, "init"));
  CHECK(derive_seed(1, "init") != derive_seed(2, "init"));
  std::set<std::uint64_t> seen;
  for (const auto& s : pipeline_commands()) seen.insert(derive_seed(5, s));
  CHECK(seen.size() == pipeline_commands().size());
}

TEST_CASE("cli usage errors") {
  TempDir t("usage");
  CHECK(run("train-bass", t.path).code == kExitUsage);
  CHECK(run("train-base", t.path, {}, std::nullopt, false).code == kExitUsage);
  CHECK(run("train-base", t.path, {"paths.corpus=/nonexistent/corpus.txt"}).code == kExitUsage);
  CHECK(run("train-base", t.path, {"fold.removal_ratio=2"}).code == kExitUsage);
  // report on an empty workdir has nothing to summarize.
  CHECK(run("report", t.path, {}, std::nullopt, false).code == kExitUsage);

  const Run missing = run("fold", t.path);
  CHECK(missing.code == kExitUsage);
  CHECK(missing.err.find("train-base") != std::string::npos);
  CHECK(missing.err.find("foldlab train-base") != std::string::npos);
}

TEST_CASE("numerical failure exits with its own code") {
  TempDir t("nan");
  const Run r = run("train-base", t.path, {"train.lr=1.0e300"});
  CHECK(r.code == kExitNumerical);
  CHECK(!fs::exists(t.path / "train-base" / "manifest.json"));
}

TEST_CASE("partial pipeline report") {
  TempDir t("partial");
  REQUIRE(run("train-base", t.path).code == kExitOk);
  REQUIRE(run("profile", t.path).code == kExitOk);
  const Run r = run("report", t.path, {}, std::nullopt, false);
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("[similarity]") != std::string::npos);
  CHECK(r.out.find("[gates]") == std::string::npos);
  CHECK(r.out.find("[fold]") == std::string::npos);
  CHECK(line_count(t.path / "report" / "similarity.csv") == 1 + 4);
  CHECK(!fs::exists(t.path / "report" / "gates.csv"));
}

TEST_CASE("zero gate steps keep the initial gates") {
  TempDir t("zero");
  REQUIRE(run("train-base", t.path).code == kExitOk);
  REQUIRE(run("gate-train", t.path, {"gate.steps=0"}).code == kExitOk);
  const json g = json::parse(slurp(t.path / "gate-train" / "gates.json"));
  for (double v : g.at("gates").get<std::vector<double>>()) CHECK(std::abs(v - 0.95) <= 1e-12);
}

TEST_CASE("full pipeline") {
  TempDir a("full_a"), b("full_b");
  const Run r = run("all", a.path, {}, 7);
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);

  for (const auto& stage : pipeline_commands()) {
    CAPTURE(stage);
    const json m = json::parse(slurp(a.path / stage / "manifest.json"));
    CHECK(m.at("stage") == stage);
    CHECK(m.at("seed") == 7);
    CHECK(!m.at("outputs").empty());
  }
  const fs::path rep = a.path / "report";
  CHECK(line_count(rep / "similarity.csv") == 1 + 4);
  CHECK(line_count(rep / "gates.csv") == 1 + 4);

  const std::string summary = slurp(rep / "summary.txt");
  for (const char* section : {"[base model]", "[similarity]", "[gates]", "[removal]", "[fold]", "[recovery]",
                              "[comparison]"}) {
    CHECK(summary.find(section) != std::string::npos);
  }
  const std::string cmp = slurp(a.path / "compare" / "compare.txt");
  CHECK(summary.substr(summary.find("[comparison]\n") + 13) == cmp);

  const json reports = json::parse(slurp(a.path / "eval" / "reports.json"));
  std::set<std::string> ids;
  for (const auto& e : reports) ids.insert(e.at("report").at("model_id").get<std::string>());
  CHECK(ids.count("dense") == 1);
  CHECK(ids.count("recovered") == 1);

  // A second invocation finds every stage current.
  const Run again = run("all", a.path, {}, 7);
  CHECK(again.code == kExitOk);
  CHECK(again.out.find("up to date") != std::string::npos);
  CHECK(again.out.find("wrote") == std::string::npos);

  // A config change reruns only the affected stage and what follows it.
  const Run changed = run("eval", a.path, {"eval.max_windows=8"}, 7);
  CHECK(changed.code == kExitOk);
  CHECK(changed.out.find("eval: wrote") != std::string::npos);

  // Same seed and config in another workdir gives identical artifacts.
  REQUIRE(run("all", b.path, {}, 7).code == kExitOk);
  for (const char* f : {"train-base/base.ckpt", "gate-train/gates.json", "fold/folded.ckpt",
                        "recover/recovered.ckpt", "compare/compare.csv"}) {
    CAPTURE(f);
    CHECK(slurp(a.path / f) == slurp(b.path / f));
  }
}
