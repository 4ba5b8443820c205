// SPDX-License-Identifier: Apache-2.0
#include "foldlab/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "foldlab/checkpoint.hpp"
#include "foldlab/config.hpp"
#include "foldlab/errors.hpp"
#include "foldlab/eval.hpp"
#include "foldlab/fold.hpp"
#include "foldlab/gates.hpp"
#include "foldlab/hash.hpp"
#include "foldlab/profiler.hpp"
#include "foldlab/recovery.hpp"
#include "foldlab/train.hpp"

namespace foldlab {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& pipeline_commands() {
  static const std::vector<std::string> kCommands = {"train-base", "profile", "gate-train", "remove",
                                                     "fold",       "recover", "eval",       "compare",
                                                     "report"};
  return kCommands;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& stage) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : stage) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = seed ^ h;  // splitmix64 finalizer
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

class MissingArtifact : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kManifest = "manifest.json";

void write_file(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) { return read_text_file(path.string()); }

json read_json(const fs::path& path) { return json::parse(read_file(path)); }

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

// Advisory per-workdir lock, released when the process exits.
class WorkdirLock {
 public:
  explicit WorkdirLock(const fs::path& dir) {
    fs::create_directories(dir);
    const fs::path path = dir / ".foldlab.lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw std::runtime_error("workdir " + dir.string() + " is locked by another foldlab command");
    }
  }
  ~WorkdirLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  WorkdirLock(const WorkdirLock&) = delete;
  WorkdirLock& operator=(const WorkdirLock&) = delete;

 private:
  int fd_ = -1;
};

struct Context {
  PipelineConfig cfg;
  fs::path workdir;
  bool force = false;
  std::ostream& out;
};

bool stage_done(const Context& ctx, const std::string& stage) {
  return fs::exists(ctx.workdir / stage / kManifest);
}

// Path of an upstream artifact; throws naming the command that produces it.
fs::path require(const Context& ctx, const std::string& stage, const std::string& file,
                 const std::string& by) {
  const fs::path p = ctx.workdir / stage / file;
  if (!stage_done(ctx, stage) || !fs::exists(p)) {
    throw MissingArtifact(by + " needs " + stage + "/" + file + "; run `foldlab " + stage +
                          "` first");
  }
  return p;
}

using Inputs = std::map<std::string, fs::path>;  // manifest key -> file

json hash_inputs(const Inputs& inputs) {
  json j = json::object();
  for (const auto& [key, path] : inputs) j[key] = sha256_file(path.string());
  return j;
}

bool up_to_date(const fs::path& dir, const std::string& config_hash, std::uint64_t seed,
                const json& inputs) {
  const fs::path mpath = dir / kManifest;
  if (!fs::exists(mpath)) return false;
  json m;
  try {
    m = read_json(mpath);
  } catch (const std::exception&) {
    return false;
  }
  if (m.value("config_hash", "") != config_hash || m.value("seed", std::uint64_t{0}) != seed ||
      m.value("inputs", json::object()) != inputs) {
    return false;
  }
  const json outputs = m.value("outputs", json::object());
  for (const auto& [name, hash] : outputs.items()) {
    const fs::path p = dir / name;
    if (!fs::exists(p) || sha256_file(p.string()) != hash.get<std::string>()) return false;
  }
  return true;
}

// Runs `body` in the stage directory unless an identical run is recorded.
// `body` returns the output file names it wrote.
void run_stage(Context& ctx, const std::string& stage, const Inputs& inputs,
               const std::function<std::vector<std::string>(const fs::path&)>& body) {
  const fs::path dir = ctx.workdir / stage;
  const std::string config_hash = sha256_hex(ctx.cfg.section_json(stage).dump());
  const json input_hashes = hash_inputs(inputs);
  if (!ctx.force && up_to_date(dir, config_hash, ctx.cfg.seed, input_hashes)) {
    ctx.out << stage << ": up to date (use --force to rerun)\n" << std::flush;
    return;
  }
  fs::create_directories(dir);
  fs::remove(dir / kManifest);
  const std::vector<std::string> outputs = body(dir);
  json out_hashes = json::object();
  for (const auto& name : outputs) out_hashes[name] = sha256_file((dir / name).string());
  write_json(dir / kManifest, {{"stage", stage},
                               {"config_hash", config_hash},
                               {"config", ctx.cfg.section_json(stage)},
                               {"seed", ctx.cfg.seed},
                               {"inputs", input_hashes},
                               {"outputs", out_hashes}});
  ctx.out << stage << ": wrote " << outputs.size() << " artifacts to " << dir.string() << "\n" << std::flush;
}

CorpusSplit load_split(const Context& ctx, const Tokenizer& tok) {
  const std::vector<int> ids = tok.encode(read_text_file(ctx.cfg.corpus));
  return split_corpus(ids, ctx.cfg.data.held_in_fraction);
}

std::vector<Batch> profile_batches(const Context& ctx, const Model& model, std::span<const int> tokens) {
  return window_batches(tokens, model.config.max_seq + 1, ctx.cfg.profile.rows_per_batch,
                        ctx.cfg.profile.max_windows);
}

std::string losses_csv(std::span<const double> losses) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
  return os.str();
}

json profile_to_json(const SimilarityProfile& p, const BIReport& bi) {
  return {{"per_block", p.per_block},
          {"group", p.group},
          {"sample_count", p.sample_count},
          {"zero_vector_pairs", p.zero_vector_pairs},
          {"bi", {{"scores", bi.scores}, {"ranking", bi.ranking}}}};
}

std::vector<std::size_t> block_param_counts(const Model& m) {
  std::vector<std::size_t> out;
  for (const auto& b : m.blocks) out.push_back(b.param_count());
  return out;
}

const Inputs with_corpus(const Context& ctx, Inputs in) {
  in["corpus"] = ctx.cfg.corpus;
  return in;
}

void cmd_train_base(Context& ctx) {
  run_stage(ctx, "train-base", with_corpus(ctx, {}), [&](const fs::path& dir) {
    const std::string text = read_text_file(ctx.cfg.corpus);
    const Tokenizer tok = Tokenizer::from_text(text, ctx.cfg.data.max_vocab);
    const CorpusSplit split = load_split(ctx, tok);
    ModelConfig mc = ctx.cfg.model;
    mc.vocab_size = tok.vocab_size();
    mc.seed = derive_seed(ctx.cfg.seed, "init");
    BaseTrainConfig tc = ctx.cfg.train;
    tc.seed = derive_seed(ctx.cfg.seed, "train-base");
    const BaseTrainResult r = train_base(mc, tok, split.held_in, tc);
    save_model((dir / "base.ckpt").string(), r.model);
    write_file(dir / "losses.csv", losses_csv(r.losses));
    write_json(dir / "summary.json",
               {{"steps", r.losses.size()},
                {"initial_loss", r.losses.empty() ? json(nullptr) : json(r.losses.front())},
                {"final_loss", r.losses.empty() ? json(nullptr) : json(r.losses.back())},
                {"param_count", r.model.param_count()},
                {"block_param_count", r.model.block_param_count()},
                {"vocab_size", mc.vocab_size},
                {"held_in_tokens", split.held_in.size()},
                {"held_out_tokens", split.held_out.size()}});
    return std::vector<std::string>{"base.ckpt", "losses.csv", "summary.json"};
  });
}

void cmd_profile(Context& ctx) {
  const fs::path base = require(ctx, "train-base", "base.ckpt", "profile");
  run_stage(ctx, "profile", with_corpus(ctx, {{"train-base/base.ckpt", base}}), [&](const fs::path& dir) {
    const Model model = load_model(base.string());
    const CorpusSplit split = load_split(ctx, model.tokenizer);
    const SimilarityProfile prof = profile_blocks(model, profile_batches(ctx, model, split.held_in));
    const BIReport bi = bi_from_profile(prof);
    write_json(dir / "profile.json", profile_to_json(prof, bi));
    write_file(dir / "profile.csv", profile_csv(prof, ctx.cfg.profile.starts));
    return std::vector<std::string>{"profile.json", "profile.csv"};
  });
}

void cmd_gate_train(Context& ctx) {
  const fs::path base = require(ctx, "train-base", "base.ckpt", "gate-train");
  run_stage(ctx, "gate-train", with_corpus(ctx, {{"train-base/base.ckpt", base}}), [&](const fs::path& dir) {
    const Model model = load_model(base.string());
    const CorpusSplit split = load_split(ctx, model.tokenizer);
    GateTrainConfig gc = ctx.cfg.gate;
    gc.seed = derive_seed(ctx.cfg.seed, "gate-train");
    const GateTrainResult r = train_gates(model, split.held_in, gc);
    json g = gates_to_json(r.gates);
    g["lambda_resource"] = r.lambda_resource;
    write_json(dir / "gates.json", g);
    write_file(dir / "trajectory.csv", trajectory_csv(r.trajectory));
    write_json(dir / "importance.json", removal_to_json(r.importance));
    return std::vector<std::string>{"gates.json", "trajectory.csv", "importance.json"};
  });
}

void cmd_remove(Context& ctx) {
  const fs::path base = require(ctx, "train-base", "base.ckpt", "remove");
  const fs::path gates = require(ctx, "gate-train", "gates.json", "remove");
  const fs::path prof = require(ctx, "profile", "profile.json", "remove");
  const Inputs in = {{"train-base/base.ckpt", base}, {"gate-train/gates.json", gates},
                     {"profile/profile.json", prof}};
  run_stage(ctx, "remove", in, [&](const fs::path& dir) {
    const Model model = load_model(base.string());
    const double ratio = ctx.cfg.fold.removal_ratio;
    const PrunedModel by_gate = rank_and_remove(model, gates_from_json(read_json(gates)), ratio,
                                                ctx.cfg.gate.seq_len);
    const auto bi = read_json(prof).at("bi").at("scores").get<std::vector<double>>();
    const PrunedModel by_bi = remove_by_scores(model, bi, ratio, "bi");
    save_model((dir / "pruned.ckpt").string(), by_gate.model);
    save_model((dir / "pruned_bi.ckpt").string(), by_bi.model);
    write_json(dir / "removal.json", removal_to_json(by_gate.report));
    write_json(dir / "removal_bi.json", removal_to_json(by_bi.report));
    return std::vector<std::string>{"pruned.ckpt", "pruned_bi.ckpt", "removal.json", "removal_bi.json"};
  });
}

void cmd_fold(Context& ctx) {
  const fs::path base = require(ctx, "train-base", "base.ckpt", "fold");
  const fs::path removal = require(ctx, "remove", "removal.json", "fold");
  const fs::path prof = require(ctx, "profile", "profile.json", "fold");
  const Inputs in = with_corpus(ctx, {{"train-base/base.ckpt", base},
                                      {"remove/removal.json", removal},
                                      {"profile/profile.json", prof}});
  run_stage(ctx, "fold", in, [&](const fs::path& dir) {
    const Model model = load_model(base.string());
    const RemovalReport rr = removal_from_json(read_json(removal));
    const Model pruned = rr.removed.empty() ? model : remove_blocks(model, rr.removed);
    const CorpusSplit split = load_split(ctx, model.tokenizer);
    // Group similarity is measured on the pruned stack, where the groups live.
    const SimilarityProfile retained = profile_blocks(pruned, profile_batches(ctx, pruned, split.held_in));
    const std::vector<std::size_t> params = block_param_counts(model);
    const FoldPlan plan = plan_fold(retained, rr, params, ctx.cfg.fold.fold_ratio, ctx.cfg.fold.group_size);
    const FoldedModel folded = apply_fold(model, plan, {.with_bias = ctx.cfg.fold.with_bias});
    save_folded((dir / "folded.ckpt").string(), folded);
    write_json(dir / "plan.json", fold_plan_to_json(plan));
    const std::vector<std::size_t> starts = {0};
    write_file(dir / "retained_profile.csv", profile_csv(retained, starts));
    write_json(dir / "params.json", {{"dense", count_params(model).to_json()},
                                     {"folded", count_params(folded).to_json()}});
    return std::vector<std::string>{"folded.ckpt", "plan.json", "retained_profile.csv", "params.json"};
  });
}

void cmd_recover(Context& ctx) {
  const fs::path base = require(ctx, "train-base", "base.ckpt", "recover");
  const fs::path folded_path = require(ctx, "fold", "folded.ckpt", "recover");
  const Inputs in = with_corpus(ctx, {{"train-base/base.ckpt", base}, {"fold/folded.ckpt", folded_path}});
  run_stage(ctx, "recover", in, [&](const fs::path& dir) {
    const Model teacher = load_model(base.string());
    const CorpusSplit split = load_split(ctx, teacher.tokenizer);
    RecoveryConfig rc = ctx.cfg.recovery;
    rc.seed = derive_seed(ctx.cfg.seed, "recover");
    rc.eval_seq_len = ctx.cfg.eval.seq_len;
    rc.eval_max_windows = ctx.cfg.eval.max_windows;
    FoldedModel student = load_folded(folded_path.string());
    const RecoveryResult r = recover_train(std::move(student), teacher, split.held_in, split.held_out, rc);
    save_folded((dir / "recovered.ckpt").string(), r.model);
    write_file(dir / "trace.csv", recovery_trace_csv(r.trace));
    const TrainableManifest tm = select_trainable(r.model, rc.train_child_norms);
    write_json(dir / "recovery.json", {{"before", r.before.to_json()},
                                       {"after", r.after.to_json()},
                                       {"steps", r.trace.size()},
                                       {"trainable", tm.trainable},
                                       {"trainable_count", tm.trainable_count},
                                       {"frozen_count", tm.frozen_count}});
    return std::vector<std::string>{"recovered.ckpt", "trace.csv", "recovery.json"};
  });
}

void cmd_eval(Context& ctx) {
  const fs::path base = require(ctx, "train-base", "base.ckpt", "eval");
  Inputs in = with_corpus(ctx, {{"train-base/base.ckpt", base}});
  const auto optional = [&](const std::string& stage, const std::string& file) {
    const fs::path p = ctx.workdir / stage / file;
    if (stage_done(ctx, stage) && fs::exists(p)) in[stage + "/" + file] = p;
  };
  optional("remove", "pruned.ckpt");
  optional("remove", "pruned_bi.ckpt");
  optional("remove", "removal.json");
  optional("remove", "removal_bi.json");
  optional("fold", "folded.ckpt");
  optional("fold", "plan.json");
  optional("recover", "recovered.ckpt");
  run_stage(ctx, "eval", in, [&](const fs::path& dir) {
    const Model dense = load_model(base.string());
    const CorpusSplit split = load_split(ctx, dense.tokenizer);
    const std::size_t seq = ctx.cfg.eval.seq_len ? ctx.cfg.eval.seq_len : dense.config.max_seq;
    const EvalOptions opts{.rows_per_batch = ctx.cfg.eval.rows_per_batch,
                           .max_windows = ctx.cfg.eval.max_windows};
    const std::string corpus_id = fs::path(ctx.cfg.corpus).filename().string() + "#held_out";
    const std::size_t dense_blocks = count_params(dense).block_total;
    json reports = json::array();
    std::vector<std::string> outputs;
    auto emit = [&](const EvalReport& r, const std::string& method, double removal, double fold,
                    double compression) {
      write_json(dir / (r.model_id + ".json"), r.to_json());
      outputs.push_back(r.model_id + ".json");
      reports.push_back({{"report", r.to_json()},
                         {"method", method},
                         {"removal_ratio", removal},
                         {"fold_ratio", fold},
                         {"param_compression", compression}});
      ctx.out << "  " << r.model_id << ": ppl " << r.perplexity << "\n" << std::flush;
    };
    emit(perplexity(dense, split.held_out, seq, opts, "dense", corpus_id), "dense", 0.0, 0.0, 0.0);
    for (const auto& [id, ckpt, report, method] :
         {std::tuple{"removed_gate", "pruned.ckpt", "removal.json", "gate"},
          std::tuple{"removed_bi", "pruned_bi.ckpt", "removal_bi.json", "bi"}}) {
      const std::string key = std::string("remove/") + ckpt;
      if (!in.contains(key) || !in.contains(std::string("remove/") + report)) continue;
      const Model m = load_model(in.at(key).string());
      const RemovalReport rr = removal_from_json(read_json(in.at(std::string("remove/") + report)));
      emit(perplexity(m, split.held_out, seq, opts, id, corpus_id), method, rr.realized_ratio, 0.0,
           count_params(m).compression_vs(dense_blocks));
    }
    double fold_removal = 0.0, fold_ratio = 0.0;
    if (in.contains("fold/plan.json")) {
      const FoldPlan plan = fold_plan_from_json(read_json(in.at("fold/plan.json")));
      fold_ratio = plan.realized_ratio;
      double removed = 0.0, total = 0.0;
      for (std::size_t i = 0; i < dense.blocks.size(); ++i) {
        const double p = static_cast<double>(dense.blocks[i].param_count());
        total += p;
        if (std::find(plan.removed.begin(), plan.removed.end(), i) != plan.removed.end()) removed += p;
      }
      fold_removal = removed / total;
    }
    for (const auto& [id, key, method] :
         {std::tuple{"folded", "fold/folded.ckpt", "gate+fold"},
          std::tuple{"recovered", "recover/recovered.ckpt", "gate+fold+recovery"}}) {
      if (!in.contains(key)) continue;
      const FoldedModel f = load_folded(in.at(key).string());
      emit(perplexity(f, split.held_out, seq, opts, id, corpus_id), method, fold_removal, fold_ratio,
           count_params(f).compression_vs(dense_blocks));
    }
    write_json(dir / "reports.json", reports);
    outputs.push_back("reports.json");
    return outputs;
  });
}

CompareTable load_compare(const fs::path& reports_path) {
  std::vector<CompareEntry> entries;
  for (const auto& e : read_json(reports_path)) {
    entries.push_back({EvalReport::from_json(e.at("report")), e.at("method").get<std::string>(),
                       e.at("removal_ratio").get<double>(), e.at("fold_ratio").get<double>(),
                       e.at("param_compression").get<double>()});
  }
  return compare(entries, "dense");
}

void cmd_compare(Context& ctx) {
  const fs::path reports = require(ctx, "eval", "reports.json", "compare");
  run_stage(ctx, "compare", {{"eval/reports.json", reports}}, [&](const fs::path& dir) {
    const CompareTable t = load_compare(reports);
    write_file(dir / "compare.csv", compare_csv(t));
    write_file(dir / "compare.txt", compare_text(t));
    return std::vector<std::string>{"compare.csv", "compare.txt"};
  });
  ctx.out << read_file(ctx.workdir / "compare" / "compare.txt");
}

void cmd_report(Context& ctx) {
  Inputs in;
  for (const auto& stage : pipeline_commands()) {
    if (stage != "report" && stage_done(ctx, stage)) in[stage + "/manifest.json"] = ctx.workdir / stage / kManifest;
  }
  if (in.empty()) {
    throw MissingArtifact("report: workdir " + ctx.workdir.string() + " holds no completed stage");
  }
  run_stage(ctx, "report", in, [&](const fs::path& dir) {
    std::ostringstream s;
    s.precision(6);
    std::vector<std::string> outputs;
    s << "foldlab report\n==============\n";
    if (stage_done(ctx, "train-base")) {
      const json j = read_json(ctx.workdir / "train-base" / "summary.json");
      s << "\n[base model]\n"
        << "parameters: " << j.at("param_count") << " (blocks: " << j.at("block_param_count") << ")\n"
        << "training loss: " << j.at("initial_loss") << " -> " << j.at("final_loss") << " over "
        << j.at("steps") << " steps\n";
    }
    if (stage_done(ctx, "profile")) {
      const json j = read_json(ctx.workdir / "profile" / "profile.json");
      const auto per = j.at("per_block").get<std::vector<double>>();
      const auto group = j.at("group").get<std::vector<std::vector<double>>>();
      std::ostringstream csv;
      csv.precision(17);
      csv << "block,cos_io,bi,group_from_0\n";
      s << "\n[similarity]\nblock  cos_io    bi        group_from_0\n";
      for (std::size_t i = 0; i < per.size(); ++i) {
        csv << i << ',' << per[i] << ',' << 1.0 - per[i] << ',' << group[0][i] << '\n';
        char line[128];
        std::snprintf(line, sizeof line, "%5zu  %.6f  %.6f  %.6f\n", i, per[i], 1.0 - per[i], group[0][i]);
        s << line;
      }
      write_file(dir / "similarity.csv", csv.str());
      outputs.push_back("similarity.csv");
    }
    if (stage_done(ctx, "gate-train")) {
      const json j = read_json(ctx.workdir / "gate-train" / "gates.json");
      const json imp = read_json(ctx.workdir / "gate-train" / "importance.json");
      const auto g = j.at("gates").get<std::vector<double>>();
      const auto scores = imp.at("block_scores").get<std::vector<double>>();
      std::ostringstream csv;
      csv.precision(17);
      csv << "block,g_att,g_ffn,score\n";
      s << "\n[gates]\nlambda_resource: " << j.at("lambda_resource") << "  final eps: " << j.at("eps") << "\n"
        << "block  g_att     g_ffn     score\n";
      for (std::size_t i = 0; i < scores.size(); ++i) {
        csv << i << ',' << g[2 * i] << ',' << g[2 * i + 1] << ',' << scores[i] << '\n';
        char line[128];
        std::snprintf(line, sizeof line, "%5zu  %.6f  %.6f  %.6f\n", i, g[2 * i], g[2 * i + 1], scores[i]);
        s << line;
      }
      s << "ranking (least important first): " << imp.at("ranking").dump() << "\n";
      write_file(dir / "gates.csv", csv.str());
      write_file(dir / "gate_trajectory.csv", read_file(ctx.workdir / "gate-train" / "trajectory.csv"));
      outputs.push_back("gates.csv");
      outputs.push_back("gate_trajectory.csv");
    }
    if (stage_done(ctx, "remove")) {
      const json g = read_json(ctx.workdir / "remove" / "removal.json");
      const json b = read_json(ctx.workdir / "remove" / "removal_bi.json");
      s << "\n[removal]\ngate ranking removes " << g.at("removed").dump() << " (ratio "
        << g.at("realized_ratio") << ")\nBI ranking removes " << b.at("removed").dump() << " (ratio "
        << b.at("realized_ratio") << ")\n";
    }
    if (stage_done(ctx, "fold")) {
      const json p = read_json(ctx.workdir / "fold" / "plan.json");
      s << "\n[fold]\n";
      for (const auto& g : p.at("groups")) {
        s << "group: parent " << g.at("parent") << ", children " << g.at("children").dump()
          << ", similarity " << g.at("similarity") << "\n";
      }
      s << "fold ratio: " << p.at("realized_ratio") << "\n";
    }
    if (stage_done(ctx, "recover")) {
      const json r = read_json(ctx.workdir / "recover" / "recovery.json");
      s << "\n[recovery]\nsteps: " << r.at("steps") << "  trainable parameters: " << r.at("trainable_count")
        << "\nheld-out ppl: " << r.at("before").at("perplexity") << " -> " << r.at("after").at("perplexity")
        << "\n";
    }
    if (stage_done(ctx, "compare")) {
      s << "\n[comparison]\n" << read_file(ctx.workdir / "compare" / "compare.txt");
    }
    write_file(dir / "summary.txt", s.str());
    outputs.push_back("summary.txt");
    return outputs;
  });
  ctx.out << read_file(ctx.workdir / "report" / "summary.txt");
}

void dispatch(Context& ctx, const std::string& cmd) {
  if (cmd == "train-base") cmd_train_base(ctx);
  else if (cmd == "profile") cmd_profile(ctx);
  else if (cmd == "gate-train") cmd_gate_train(ctx);
  else if (cmd == "remove") cmd_remove(ctx);
  else if (cmd == "fold") cmd_fold(ctx);
  else if (cmd == "recover") cmd_recover(ctx);
  else if (cmd == "eval") cmd_eval(ctx);
  else if (cmd == "compare") cmd_compare(ctx);
  else if (cmd == "report") cmd_report(ctx);
  else throw ConfigError("", "unknown command '" + cmd + "'");
}

fs::path resolve_workdir(const CliRequest& req, const PipelineConfig* cfg) {
  if (req.workdir) return *req.workdir;
  if (cfg && !cfg->workdir.empty()) return cfg->workdir;
  if (const char* env = std::getenv("FOLDLAB_WORKDIR"); env && *env) return env;
  return "work";
}

}  // namespace

int run_cli(const CliRequest& req, std::ostream& out, std::ostream& err) {
  try {
    const bool known = req.command == "all" ||
                       std::find(pipeline_commands().begin(), pipeline_commands().end(), req.command) !=
                           pipeline_commands().end();
    if (!known) {
      err << "error: unknown command '" << req.command << "'\n";
      return kExitUsage;
    }
    PipelineConfig cfg;
    const bool have_config = req.config_path.has_value();
    if (have_config) {
      cfg = load_config(*req.config_path, req.overrides);
    } else if (req.command != "report") {
      err << "error: " << req.command << " needs --config PATH\n";
      return kExitUsage;
    }
    if (req.seed) cfg.seed = *req.seed;
    if (have_config && !fs::exists(cfg.corpus)) {
      throw ConfigError("paths.corpus", "file " + cfg.corpus + " does not exist");
    }
    Context ctx{cfg, resolve_workdir(req, have_config ? &cfg : nullptr), req.force, out};
    WorkdirLock lock(ctx.workdir);
    if (req.command == "all") {
      for (const auto& c : pipeline_commands()) dispatch(ctx, c);
    } else {
      dispatch(ctx, req.command);
    }
    return kExitOk;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace foldlab
