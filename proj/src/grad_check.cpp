// SPDX-License-Identifier: Apache-2.0
#include "foldlab/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "foldlab/errors.hpp"

namespace foldlab {

namespace {
double eval_loss(const LossBuilder& loss) {
  Tape tape;
  return tape.value(loss(tape)).item();
}
}  // namespace

GradCheckReport grad_check(const LossBuilder& loss, std::span<const GradCheckParam> params,
                           double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be > 0");
  GradMap analytic;
  {
    Tape tape;
    const Var out = loss(tape);
    if (!std::isfinite(tape.value(out).item())) {
      throw NumericalError("grad_check: loss is not finite at the base point", 0);
    }
    analytic = tape.backward(out);
  }

  GradCheckReport report;
  for (const auto& p : params) {
    auto it = analytic.find(p.name);
    if (it == analytic.end()) {
      throw std::invalid_argument("grad_check: loss did not register parameter '" + p.name + "'");
    }
    const Tensor& grad = it->second;
    Tensor& t = *p.tensor;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t[i];
      t[i] = saved + step;
      const double up = eval_loss(loss);
      t[i] = saved - step;
      const double down = eval_loss(loss);
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      if (!std::isfinite(numeric) || !std::isfinite(grad[i])) {
        throw NumericalError("grad_check: non-finite value for " + p.name + "[" +
                                 std::to_string(i) + "]",
                             i);
      }
      const double rel = std::abs(grad[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (report.checked == 0 || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p.name;
        report.worst_index = i;
      }
      ++report.checked;
    }
  }
  return report;
}

}  // namespace foldlab
