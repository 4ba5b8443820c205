// SPDX-License-Identifier: Apache-2.0
#include "foldlab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace foldlab {

namespace {
const Tensor& grad_for(const GradMap& grads, const NamedTensor& p) {
  auto it = grads.find(p.name);
  if (it == grads.end()) throw std::invalid_argument("optimizer: no gradient for " + p.name);
  if (it->second.numel() != p.tensor->numel()) {
    throw std::invalid_argument("optimizer: gradient shape mismatch for " + p.name);
  }
  return it->second;
}
}  // namespace

void AdamW::step(std::span<const NamedTensor> params, const GradMap& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& p : params) {
    const Tensor& g = grad_for(grads, p);
    auto& s = state_[p.name];
    const std::size_t n = p.tensor->numel();
    if (s.m.empty()) {
      s.m.assign(n, 0.0);
      s.v.assign(n, 0.0);
    }
    Tensor& w = *p.tensor;
    for (std::size_t i = 0; i < n; ++i) {
      s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g[i];
      s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * w[i]);
    }
  }
}

void SgdMomentum::step(std::span<const NamedTensor> params, const GradMap& grads, double lr) {
  for (const auto& p : params) {
    const Tensor& g = grad_for(grads, p);
    auto& v = velocity_[p.name];
    if (v.empty()) v.assign(g.numel(), 0.0);
    Tensor& w = *p.tensor;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      w[i] -= lr * v[i];
    }
  }
}

}  // namespace foldlab
