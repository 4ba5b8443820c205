// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "foldlab/tensor.hpp"

namespace foldlab {

// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct Var {
  std::size_t id = 0;
};

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  BatchMatMul,
  Add,
  Mul,
  ScaleConst,
  ScaleBy,
  Softmax,
  CausalMask,
  RmsNorm,
  Gelu,
  Embedding,
  CrossEntropy,
  Reshape,
  Transpose12,
  SliceLast,
  Sum,
  Gate,
  KlDiv,
};

const char* op_name(OpKind op);

// Which derivative the gate primitive propagates. Analytic is the true
// derivative of x^2/(x^2+eps); Printed drops the square in the denominator
// and exists only for side-by-side comparison.
enum class GateGradient : std::uint8_t { Analytic, Printed };

struct TapeNode {
  OpKind op = OpKind::Leaf;
  std::vector<std::size_t> inputs;
  std::vector<Tensor> saved;
  std::vector<int> indices;
  double scalar = 0.0;
  std::size_t offset = 0;
  bool flag = false;
  bool requires_grad = false;
  std::string name;  // named parameters only
};

using GradMap = std::map<std::string, Tensor>;

// Append-only record of a forward computation. Node ids increase in creation
// order, so reverse id order is a valid topological order for backward.
//
// Borrowed leaves (constant_ref / parameter) keep a pointer to caller storage;
// that storage must stay alive and unmodified for the life of the tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Tensor value);
  Var constant_ref(const Tensor& value);
  // Named leaf that receives a gradient. Names must be unique per tape.
  Var parameter(std::string name, const Tensor& value);

  // [..., k] x [k, n] -> [..., n]
  Var matmul(Var a, Var b);
  // [B, m, k] x [B, k, n] -> [B, m, n]; with transpose_b, b is [B, n, k].
  Var bmm(Var a, Var b, bool transpose_b);
  // b must have a's shape or a suffix of it (broadcast over leading axes).
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  // Multiplies every element of a by the single element of s.
  Var scale_by(Var a, Var s);
  Var softmax(Var a);
  // Adds -inf above the diagonal of the trailing [s, s] matrices.
  Var causal_mask(Var a);
  Var rms_norm(Var x, Var gain, double eps = 1e-5);
  Var gelu(Var x);
  // Looks up rows of table [V, d]; output shape is prefix + {d}.
  Var embedding(Var table, std::span<const int> ids, const Shape& prefix);
  // Mean next-token cross-entropy over the rows of logits [..., V].
  Var cross_entropy(Var logits, std::span<const int> targets);
  Var reshape(Var a, Shape shape);
  // [a, b, c, e] -> [a, c, b, e]
  Var transpose12(Var a);
  Var slice_last(Var a, std::size_t offset, std::size_t length);
  Var sum(Var a);
  // Elementwise x^2 / (x^2 + eps).
  Var gate(Var alpha, double eps, GateGradient grad = GateGradient::Analytic);
  // Mean over rows of KL(target || probs); target is a constant distribution.
  Var kl_div(const Tensor& target, Var probs);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const TapeNode& node(Var v) const { return nodes_.at(v.id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Reverse-mode sweep from a scalar loss. Every named parameter gets an
  // entry; parameters the loss does not depend on get exact zeros.
  GradMap backward(Var loss) const;

 private:
  Var push(TapeNode node, Tensor value);
  Var push_borrowed(TapeNode node, const Tensor* value);
  void check(Var v) const;

  std::vector<TapeNode> nodes_;
  std::vector<Tensor> values_;
  std::vector<const Tensor*> borrowed_;
  std::unordered_set<std::string> names_;
};

// Gate function, its analytic derivative and the printed variant.
double gate_value(double x, double eps);
double gate_derivative(double x, double eps);
double gate_derivative_printed(double x, double eps);

// Mean over rows of KL(target || pred), skipping zero-probability target
// entries. Both tensors hold row distributions over the last axis.
double kl_divergence_rows(const Tensor& target, const Tensor& pred);

}  // namespace foldlab
