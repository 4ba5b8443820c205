// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "foldlab/tape.hpp"

namespace foldlab {

struct GradCheckParam {
  std::string name;
  Tensor* tensor = nullptr;
};

// Builds a scalar loss on the given tape. It must register every checked
// tensor with tape.parameter(name, *tensor) under the names passed to
// grad_check, reading the tensor's current contents.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Compares tape gradients with central differences element by element:
// max |analytic - numeric| / max(1, |numeric|). Tensors are perturbed in place
// and restored. Throws NumericalError (step() = element index) when a loss
// or gradient is not finite.
GradCheckReport grad_check(const LossBuilder& loss, std::span<const GradCheckParam> params,
                           double step);

}  // namespace foldlab
