// SPDX-License-Identifier: Apache-2.0
#include "foldlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "foldlab/errors.hpp"

namespace foldlab {

namespace {
constexpr const char* kMagic = "FOLDLAB-CKPT\n";

void put_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xffu));
    bits >>= 8;
  }
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) {
    bits = (bits << 8) | static_cast<unsigned char>(p[i]);
  }
  return std::bit_cast<double>(bits);
}
}  // namespace

const Tensor& TensorArchive::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("checkpoint: missing tensor '" + name + "'");
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& entry : tensors) {
    if (entry.first == name) return true;
  }
  return false;
}

std::string encode_archive(const TensorArchive& archive) {
  nlohmann::json header;
  header["format"] = "foldlab-checkpoint";
  header["version"] = kCheckpointVersion;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    header["tensors"].push_back(
        {{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
    offset += t.numel();
  }
  const std::string text = header.dump();
  std::string out = kMagic;
  out += std::to_string(text.size());
  out += '\n';
  out += text;
  out.reserve(out.size() + offset * 8);
  for (const auto& entry : archive.tensors) {
    for (double v : entry.second.data()) put_le(out, v);
  }
  return out;
}

TensorArchive decode_archive(const std::string& bytes) {
  const std::size_t magic_len = std::strlen(kMagic);
  if (bytes.compare(0, magic_len, kMagic) != 0) throw FormatError("checkpoint: bad magic");
  const std::size_t nl = bytes.find('\n', magic_len);
  if (nl == std::string::npos) throw FormatError("checkpoint: truncated header length");
  std::size_t header_len = 0;
  try {
    header_len = std::stoull(bytes.substr(magic_len, nl - magic_len));
  } catch (const std::exception&) {
    throw FormatError("checkpoint: malformed header length");
  }
  const std::size_t header_start = nl + 1;
  if (header_start + header_len > bytes.size()) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_start, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != "foldlab-checkpoint") {
    throw FormatError("checkpoint: unknown format tag");
  }
  if (header.value("version", 0) != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + header.value("version", nlohmann::json()).dump());
  }
  const std::size_t payload = header_start + header_len;
  std::size_t total = 0;
  for (const auto& t : header.at("tensors")) total += t.at("count").get<std::size_t>();
  if (bytes.size() - payload != total * 8) {
    throw FormatError("checkpoint: payload is " + std::to_string(bytes.size() - payload) +
                      " bytes, manifest declares " + std::to_string(total * 8));
  }
  TensorArchive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  std::size_t expect_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (offset != expect_offset) throw FormatError("checkpoint: non-contiguous manifest");
    Shape shape = entry.at("shape").get<Shape>();
    if (shape_numel(shape) != count) throw FormatError("checkpoint: shape/count mismatch");
    std::vector<double> data(count);
    const char* p = bytes.data() + payload + offset * 8;
    for (std::size_t i = 0; i < count; ++i) data[i] = get_le(p + i * 8);
    archive.tensors.emplace_back(entry.at("name").get<std::string>(),
                                 Tensor(std::move(shape), std::move(data)));
    expect_offset += count;
  }
  return archive;
}

void write_archive(const std::string& path, const TensorArchive& archive) {
  const std::string bytes = encode_archive(archive);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

TensorArchive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

TensorArchive model_to_archive(const Model& m) {
  TensorArchive a;
  a.meta["kind"] = "dense";
  a.meta["config"] = config_to_json(m.config);
  a.meta["alphabet"] = m.tokenizer.alphabet();
  a.tensors.emplace_back("tok_emb", m.token_embedding);
  a.tensors.emplace_back("pos_emb", m.position_embedding);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    const auto& b = m.blocks[i];
    a.tensors.emplace_back(p + ".w_qkv", b.w_qkv);
    a.tensors.emplace_back(p + ".w_o", b.w_o);
    a.tensors.emplace_back(p + ".w_up", b.w_up);
    a.tensors.emplace_back(p + ".w_down", b.w_down);
    a.tensors.emplace_back(p + ".norm_attn", b.norm_attn);
    a.tensors.emplace_back(p + ".norm_ffn", b.norm_ffn);
  }
  a.tensors.emplace_back("final_norm", m.final_norm);
  a.tensors.emplace_back("lm_head", m.lm_head);
  return a;
}

Model model_from_archive(const TensorArchive& a) {
  if (a.meta.value("kind", "") != "dense") throw FormatError("checkpoint: not a dense model");
  Model m;
  m.config = config_from_json(a.meta.at("config"));
  m.tokenizer = Tokenizer(a.meta.at("alphabet").get<std::vector<std::uint8_t>>());
  const ModelConfig& c = m.config;
  auto take = [&](const std::string& name, const Shape& shape) {
    const Tensor& t = a.at(name);
    if (t.shape() != shape) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(shape));
    }
    return t;
  };
  const std::size_t d = c.d_model;
  m.token_embedding = take("tok_emb", {c.vocab_size, d});
  m.position_embedding = take("pos_emb", {c.max_seq, d});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = "block" + std::to_string(i);
    m.blocks.push_back(BlockWeights{take(p + ".w_qkv", {d, 3 * d}), take(p + ".w_o", {d, d}),
                                    take(p + ".w_up", {d, c.d_ff}), take(p + ".w_down", {c.d_ff, d}),
                                    take(p + ".norm_attn", {d}), take(p + ".norm_ffn", {d})});
  }
  m.final_norm = take("final_norm", {d});
  m.lm_head = take("lm_head", {d, c.vocab_size});
  return m;
}

void save_model(const std::string& path, const Model& model) {
  write_archive(path, model_to_archive(model));
}

Model load_model(const std::string& path) { return model_from_archive(read_archive(path)); }

}  // namespace foldlab
