// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "foldlab/model.hpp"

namespace foldlab {

// On-disk layout:
//   "FOLDLAB-CKPT\n"
//   <decimal byte length of the header>\n
//   <header: JSON {format, version, meta, tensors: [{name, shape, offset, count}]}>
//   <payload: little-endian IEEE-754 doubles, tensors in manifest order>
// `offset` and `count` are in elements; the payload is exactly 8 * sum(count)
// bytes.
inline constexpr int kCheckpointVersion = 1;

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::string encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::string& bytes);
void write_archive(const std::string& path, const TensorArchive& archive);
TensorArchive read_archive(const std::string& path);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

TensorArchive model_to_archive(const Model& model);
Model model_from_archive(const TensorArchive& archive);

void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

}  // namespace foldlab
