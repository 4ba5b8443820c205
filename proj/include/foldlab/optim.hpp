// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "foldlab/tape.hpp"

namespace foldlab {

struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled weight decay. Moment state is keyed by parameter name.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}
  void step(std::span<const NamedTensor> params, const GradMap& grads, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Heavy-ball SGD: v = mu * v + g; p -= lr * v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}
  void step(std::span<const NamedTensor> params, const GradMap& grads, double lr);

 private:
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace foldlab
