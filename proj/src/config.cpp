// SPDX-License-Identifier: Apache-2.0
#include "foldlab/config.hpp"

#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace foldlab {

namespace {

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

// One YAML mapping; remembers which keys were read so leftovers can be
// reported as unknown.
class Section {
 public:
  Section(YAML::Node node, std::string path) : node_(std::move(node)), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) throw ConfigError(path_, "expected a mapping");
  }

  bool has(const std::string& key) const { return node_.IsMap() && node_[key] && !node_[key].IsNull(); }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    out = convert<T>(node_[key], join(path_, key));
  }

  void get_lambda(const std::string& key, std::optional<double>& out) {
    seen_.insert(key);
    if (!node_.IsMap() || !node_[key]) return;
    const YAML::Node v = node_[key];
    if (v.IsNull() || (v.IsScalar() && v.Scalar() == "auto")) {
      out.reset();
      return;
    }
    out = convert<double>(v, join(path_, key));
  }

  void get_gradient(const std::string& key, GateGradient& out) {
    std::string s = out == GateGradient::Analytic ? "analytic" : "printed";
    get(key, s);
    if (s == "analytic") out = GateGradient::Analytic;
    else if (s == "printed") out = GateGradient::Printed;
    else throw ConfigError(join(path_, key), "expected 'analytic' or 'printed', got '" + s + "'");
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    return Section(node_.IsMap() ? node_[key] : YAML::Node(), join(path_, key));
  }

  void finish() const {
    if (!node_.IsMap()) return;
    for (const auto& kv : node_) {
      const std::string k = kv.first.as<std::string>();
      if (!seen_.contains(k)) throw ConfigError(join(path_, k), "unknown key");
    }
  }

 private:
  template <class T>
  static T convert(const YAML::Node& v, const std::string& where) {
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        const long long x = v.as<long long>();
        if (x < 0) throw ConfigError(where, "must be >= 0");
        return static_cast<T>(x);
      } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
        if (!v.IsSequence()) throw ConfigError(where, "expected a list");
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
          out.push_back(convert<std::size_t>(v[i], where + "[" + std::to_string(i) + "]"));
        }
        return out;
      } else {
        if (!v.IsScalar()) throw ConfigError(where, "expected a scalar");
        return v.as<T>();
      }
    } catch (const YAML::Exception&) {
      throw ConfigError(where, "cannot read value '" + (v.IsScalar() ? v.Scalar() : std::string("<node>")) + "'");
    }
  }

  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

void set_path(YAML::Node node, const std::vector<std::string>& parts, std::size_t i,
              const YAML::Node& value, const std::string& full) {
  if (!node.IsMap() && node.IsDefined() && !node.IsNull()) {
    throw ConfigError(full, "override descends into a non-mapping value");
  }
  if (i + 1 == parts.size()) {
    node[parts[i]] = value;
    return;
  }
  YAML::Node child = node[parts[i]];
  if (!child.IsDefined() || child.IsNull()) {
    node[parts[i]] = YAML::Node(YAML::NodeType::Map);
    child = node[parts[i]];
  }
  set_path(child, parts, i + 1, value, full);
}

void apply_override(YAML::Node& root, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("", "override '" + text + "' is not of the form key=value");
  }
  const std::string key = text.substr(0, eq);
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw ConfigError(key, "empty path component in override");
    parts.push_back(p);
  }
  YAML::Node value;
  try {
    value = YAML::Load(text.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ConfigError(key, std::string("cannot parse override value: ") + e.what());
  }
  if (!root.IsMap()) root = YAML::Node(YAML::NodeType::Map);
  set_path(root, parts, 0, value, key);
}

void check_ratio(double v, const std::string& key) {
  if (!(v >= 0.0 && v < 1.0)) throw ConfigError(key, "must be in [0, 1)");
}

void check_positive(double v, const std::string& key) {
  if (!(v > 0.0)) throw ConfigError(key, "must be > 0");
}

}  // namespace

void PipelineConfig::validate() const {
  if (corpus.empty()) throw ConfigError("paths.corpus", "is required");
  if (!(data.held_in_fraction > 0.0 && data.held_in_fraction < 1.0)) {
    throw ConfigError("data.held_in_fraction", "must be in (0, 1)");
  }
  if (data.max_vocab < 2 || data.max_vocab > 257) throw ConfigError("data.max_vocab", "must be in [2, 257]");
  for (auto [v, key] : {std::pair{model.n_layers, "model.n_layers"}, {model.d_model, "model.d_model"},
                        {model.n_heads, "model.n_heads"}, {model.d_ff, "model.d_ff"}}) {
    if (v == 0) throw ConfigError(key, "must be >= 1");
  }
  if (model.d_model % model.n_heads != 0) throw ConfigError("model.n_heads", "must divide model.d_model");
  if (model.max_seq < 2) throw ConfigError("model.max_seq", "must be >= 2");
  check_positive(train.lr, "train.lr");
  if (train.batch_size == 0) throw ConfigError("train.batch_size", "must be >= 1");
  if (profile.max_windows == 0) throw ConfigError("profile.max_windows", "must be >= 1");
  if (profile.rows_per_batch == 0) throw ConfigError("profile.rows_per_batch", "must be >= 1");
  for (std::size_t k : profile.starts) {
    if (k >= model.n_layers) throw ConfigError("profile.starts", "start " + std::to_string(k) + " is not a block");
  }
  if (gate.lambda_resource && !(*gate.lambda_resource >= 0.0)) {
    throw ConfigError("gate.lambda_resource", "must be >= 0 or 'auto'");
  }
  check_positive(gate.lr, "gate.lr");
  if (!(gate.momentum >= 0.0 && gate.momentum < 1.0)) throw ConfigError("gate.momentum", "must be in [0, 1)");
  if (gate.batch_size == 0) throw ConfigError("gate.batch_size", "must be >= 1");
  check_positive(gate.schedule.eps0, "gate.eps0");
  if (!(gate.schedule.decay > 0.0 && gate.schedule.decay <= 1.0)) throw ConfigError("gate.decay", "must be in (0, 1]");
  if (gate.schedule.interval == 0) throw ConfigError("gate.decay_interval", "must be >= 1");
  if (!(gate.init_gate > 0.0 && gate.init_gate < 1.0)) throw ConfigError("gate.init_gate", "must be in (0, 1)");
  check_ratio(fold.removal_ratio, "fold.removal_ratio");
  check_ratio(fold.fold_ratio, "fold.fold_ratio");
  if (fold.group_size < 2) throw ConfigError("fold.group_size", "must be >= 2");
  check_positive(recovery.lr, "recovery.lr");
  if (recovery.batch_size == 0) throw ConfigError("recovery.batch_size", "must be >= 1");
  if (recovery.epochs == 0) throw ConfigError("recovery.epochs", "must be >= 1");
  if (!(recovery.lambda_distill >= 0.0)) throw ConfigError("recovery.lambda_distill", "must be >= 0");
  if (recovery.lora_rank == 0) throw ConfigError("recovery.lora_rank", "must be >= 1");
  if (eval.seq_len == 1 || eval.seq_len > model.max_seq) {
    throw ConfigError("eval.seq_len", "must be 0 (max_seq) or in [2, model.max_seq]");
  }
  if (eval.rows_per_batch == 0) throw ConfigError("eval.rows_per_batch", "must be >= 1");
}

nlohmann::json PipelineConfig::section_json(const std::string& stage) const {
  using nlohmann::json;
  const json data_j = {{"held_in_fraction", data.held_in_fraction}, {"max_vocab", data.max_vocab}};
  const json eval_j = {{"seq_len", eval.seq_len}, {"max_windows", eval.max_windows},
                       {"rows_per_batch", eval.rows_per_batch}};
  const json profile_j = {{"max_windows", profile.max_windows},
                          {"rows_per_batch", profile.rows_per_batch},
                          {"starts", profile.starts}};
  json j = {{"stage", stage}, {"seed", seed}};
  if (stage == "train-base") {
    j["data"] = data_j;
    j["model"] = {{"n_layers", model.n_layers}, {"d_model", model.d_model}, {"n_heads", model.n_heads},
                  {"d_ff", model.d_ff}, {"max_seq", model.max_seq}};
    j["train"] = {{"steps", train.steps}, {"lr", train.lr}, {"batch_size", train.batch_size},
                  {"seq_len", train.seq_len}, {"warmup_steps", train.warmup_steps},
                  {"weight_decay", train.weight_decay}};
  } else if (stage == "profile") {
    j["data"] = data_j;
    j["profile"] = profile_j;
  } else if (stage == "gate-train") {
    j["data"] = data_j;
    j["gate"] = {{"lambda_resource", gate.lambda_resource ? json(*gate.lambda_resource) : json("auto")},
                 {"steps", gate.steps}, {"lr", gate.lr}, {"momentum", gate.momentum},
                 {"batch_size", gate.batch_size}, {"seq_len", gate.seq_len},
                 {"init_gate", gate.init_gate}, {"eps0", gate.schedule.eps0},
                 {"decay", gate.schedule.decay}, {"decay_interval", gate.schedule.interval},
                 {"gradient", gate.gradient == GateGradient::Analytic ? "analytic" : "printed"}};
  } else if (stage == "remove") {
    j["removal_ratio"] = fold.removal_ratio;
    j["gate_seq_len"] = gate.seq_len;
  } else if (stage == "fold") {
    j["data"] = data_j;
    j["profile"] = profile_j;
    j["fold"] = {{"fold_ratio", fold.fold_ratio}, {"group_size", fold.group_size},
                 {"with_bias", fold.with_bias}};
  } else if (stage == "recover") {
    j["data"] = data_j;
    j["eval"] = eval_j;
    j["recovery"] = {{"lr", recovery.lr}, {"warmup_steps", recovery.warmup_steps},
                     {"batch_size", recovery.batch_size}, {"epochs", recovery.epochs},
                     {"lambda_distill", recovery.lambda_distill}, {"lora_rank", recovery.lora_rank},
                     {"train_child_norms", recovery.train_child_norms},
                     {"max_windows", recovery.max_windows}, {"seq_len", recovery.seq_len},
                     {"weight_decay", recovery.adamw.weight_decay}};
  } else if (stage == "eval") {
    j["data"] = data_j;
    j["eval"] = eval_j;
  }
  return j;
}

PipelineConfig parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides,
                            const std::string& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("", std::string("malformed config: ") + e.what());
  }
  for (const auto& o : overrides) apply_override(root, o);

  PipelineConfig c;
  Section top(root, "");
  top.get("seed", c.seed);
  {
    Section s = top.sub("paths");
    s.get("corpus", c.corpus);
    s.get("workdir", c.workdir);
    s.finish();
  }
  {
    Section s = top.sub("data");
    s.get("held_in_fraction", c.data.held_in_fraction);
    s.get("max_vocab", c.data.max_vocab);
    s.finish();
  }
  {
    Section s = top.sub("model");
    s.get("n_layers", c.model.n_layers);
    s.get("d_model", c.model.d_model);
    s.get("n_heads", c.model.n_heads);
    s.get("d_ff", c.model.d_ff);
    s.get("max_seq", c.model.max_seq);
    s.finish();
  }
  {
    Section s = top.sub("train");
    s.get("steps", c.train.steps);
    s.get("lr", c.train.lr);
    s.get("batch_size", c.train.batch_size);
    s.get("seq_len", c.train.seq_len);
    s.get("warmup_steps", c.train.warmup_steps);
    s.get("weight_decay", c.train.weight_decay);
    s.finish();
  }
  {
    Section s = top.sub("profile");
    s.get("max_windows", c.profile.max_windows);
    s.get("rows_per_batch", c.profile.rows_per_batch);
    s.get("starts", c.profile.starts);
    s.finish();
  }
  {
    Section s = top.sub("gate");
    s.get_lambda("lambda_resource", c.gate.lambda_resource);
    s.get("steps", c.gate.steps);
    s.get("lr", c.gate.lr);
    s.get("momentum", c.gate.momentum);
    s.get("batch_size", c.gate.batch_size);
    s.get("seq_len", c.gate.seq_len);
    s.get("init_gate", c.gate.init_gate);
    s.get("eps0", c.gate.schedule.eps0);
    s.get("decay", c.gate.schedule.decay);
    s.get("decay_interval", c.gate.schedule.interval);
    s.get_gradient("gradient", c.gate.gradient);
    s.finish();
  }
  {
    Section s = top.sub("fold");
    s.get("removal_ratio", c.fold.removal_ratio);
    s.get("fold_ratio", c.fold.fold_ratio);
    s.get("group_size", c.fold.group_size);
    s.get("with_bias", c.fold.with_bias);
    s.finish();
  }
  {
    Section s = top.sub("recovery");
    s.get("lr", c.recovery.lr);
    s.get("warmup_steps", c.recovery.warmup_steps);
    s.get("batch_size", c.recovery.batch_size);
    s.get("epochs", c.recovery.epochs);
    s.get("lambda_distill", c.recovery.lambda_distill);
    s.get("lora_rank", c.recovery.lora_rank);
    s.get("train_child_norms", c.recovery.train_child_norms);
    s.get("max_windows", c.recovery.max_windows);
    s.get("seq_len", c.recovery.seq_len);
    s.get("weight_decay", c.recovery.adamw.weight_decay);
    s.finish();
  }
  {
    Section s = top.sub("eval");
    s.get("seq_len", c.eval.seq_len);
    s.get("max_windows", c.eval.max_windows);
    s.get("rows_per_batch", c.eval.rows_per_batch);
    s.finish();
  }
  top.finish();

  namespace fs = std::filesystem;
  if (!c.corpus.empty() && fs::path(c.corpus).is_relative()) {
    c.corpus = (fs::path(base_dir) / c.corpus).lexically_normal().string();
  }
  if (!c.workdir.empty() && fs::path(c.workdir).is_relative()) {
    c.workdir = (fs::path(base_dir) / c.workdir).lexically_normal().string();
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto dir = std::filesystem::absolute(path).parent_path().string();
  return parse_config(ss.str(), overrides, dir);
}

}  // namespace foldlab
