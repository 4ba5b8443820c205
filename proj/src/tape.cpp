// SPDX-License-Identifier: Apache-2.0
#include "foldlab/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "foldlab/errors.hpp"

namespace foldlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapArr = Eigen::Map<Eigen::ArrayXd>;
using ConstMapArr = Eigen::Map<const Eigen::ArrayXd>;

ConstMapMat as_mat(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMapMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MapMat as_mat(double* p, std::size_t rows, std::size_t cols) {
  return MapMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluK = 0.044715;

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::BatchMatMul: return "bmm";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::ScaleConst: return "scale";
    case OpKind::ScaleBy: return "scale_by";
    case OpKind::Softmax: return "softmax";
    case OpKind::CausalMask: return "causal_mask";
    case OpKind::RmsNorm: return "rms_norm";
    case OpKind::Gelu: return "gelu";
    case OpKind::Embedding: return "embedding";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Reshape: return "reshape";
    case OpKind::Transpose12: return "transpose12";
    case OpKind::SliceLast: return "slice_last";
    case OpKind::Sum: return "sum";
    case OpKind::Gate: return "gate";
    case OpKind::KlDiv: return "kl_div";
  }
  return "?";
}

double gate_value(double x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("gate: eps must be > 0");
  const double x2 = x * x;
  return x2 / (x2 + eps);
}

double gate_derivative(double x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("gate: eps must be > 0");
  const double den = x * x + eps;
  return 2.0 * x * eps / (den * den);
}

double gate_derivative_printed(double x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("gate: eps must be > 0");
  return 2.0 * x * eps / (x * x + eps);
}

double kl_divergence_rows(const Tensor& target, const Tensor& pred) {
  if (target.shape() != pred.shape()) {
    shape_fail("kl_divergence_rows", target.shape(), pred.shape());
  }
  const std::size_t n = target.last_dim();
  const std::size_t rows = target.rows();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double t = target[r * n + j];
      if (t > 0.0) row += t * (std::log(t) - std::log(pred[r * n + j]));
    }
    total += row;
  }
  return total / static_cast<double>(rows);
}

// ---------------------------------------------------------------------------

void Tape::check(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("tape: unknown node id");
}

const Tensor& Tape::value(Var v) const {
  check(v);
  const Tensor* b = borrowed_[v.id];
  return b ? *b : values_[v.id];
}

Var Tape::push(TapeNode node, Tensor value) {
  nodes_.push_back(std::move(node));
  values_.push_back(std::move(value));
  borrowed_.push_back(nullptr);
  return Var{nodes_.size() - 1};
}

Var Tape::push_borrowed(TapeNode node, const Tensor* value) {
  nodes_.push_back(std::move(node));
  values_.emplace_back();
  borrowed_.push_back(value);
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Tensor value) { return push(TapeNode{}, std::move(value)); }

Var Tape::constant_ref(const Tensor& value) { return push_borrowed(TapeNode{}, &value); }

Var Tape::parameter(std::string name, const Tensor& value) {
  if (!names_.insert(name).second) {
    throw std::invalid_argument("tape: duplicate parameter name '" + name + "'");
  }
  TapeNode node;
  node.requires_grad = true;
  node.name = std::move(name);
  return push_borrowed(std::move(node), &value);
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (B.rank() != 2 || A.last_dim() != B.dim(0)) shape_fail("matmul", A.shape(), B.shape());
  const std::size_t m = A.rows(), k = B.dim(0), n = B.dim(1);
  Shape out_shape = A.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  as_mat(out.data().data(), m, n).noalias() =
      as_mat(A.data().data(), m, k) * as_mat(B.data().data(), k, n);
  TapeNode node{.op = OpKind::MatMul, .inputs = {a.id, b.id}};
  node.requires_grad = requires_grad(a) || requires_grad(b);
  return push(std::move(node), std::move(out));
}

Var Tape::bmm(Var a, Var b, bool transpose_b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0)) {
    shape_fail("bmm", A.shape(), B.shape());
  }
  const std::size_t batch = A.dim(0), m = A.dim(1), k = A.dim(2);
  const std::size_t bk = transpose_b ? B.dim(2) : B.dim(1);
  const std::size_t n = transpose_b ? B.dim(1) : B.dim(2);
  if (bk != k) shape_fail("bmm", A.shape(), B.shape());
  Tensor out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    auto am = as_mat(A.data().data() + i * m * k, m, k);
    auto om = as_mat(out.data().data() + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * as_mat(B.data().data() + i * n * k, n, k).transpose();
    } else {
      om.noalias() = am * as_mat(B.data().data() + i * k * n, k, n);
    }
  }
  TapeNode node{.op = OpKind::BatchMatMul, .inputs = {a.id, b.id}};
  node.flag = transpose_b;
  node.requires_grad = requires_grad(a) || requires_grad(b);
  return push(std::move(node), std::move(out));
}

Var Tape::add(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!is_suffix(A.shape(), B.shape())) shape_fail("add", A.shape(), B.shape());
  Tensor out = A;
  const std::size_t n = B.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i % n];
  TapeNode node{.op = OpKind::Add, .inputs = {a.id, b.id}};
  node.requires_grad = requires_grad(a) || requires_grad(b);
  return push(std::move(node), std::move(out));
}

Var Tape::mul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!is_suffix(A.shape(), B.shape())) shape_fail("mul", A.shape(), B.shape());
  Tensor out = A;
  const std::size_t n = B.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i % n];
  TapeNode node{.op = OpKind::Mul, .inputs = {a.id, b.id}};
  node.requires_grad = requires_grad(a) || requires_grad(b);
  return push(std::move(node), std::move(out));
}

Var Tape::scale(Var a, double factor) {
  Tensor out = value(a);
  for (auto& v : out.data()) v *= factor;
  TapeNode node{.op = OpKind::ScaleConst, .inputs = {a.id}};
  node.scalar = factor;
  node.requires_grad = requires_grad(a);
  return push(std::move(node), std::move(out));
}

Var Tape::scale_by(Var a, Var s) {
  const Tensor& S = value(s);
  if (S.numel() != 1) shape_fail("scale_by", value(a).shape(), S.shape());
  const double f = S[0];
  Tensor out = value(a);
  for (auto& v : out.data()) v *= f;
  TapeNode node{.op = OpKind::ScaleBy, .inputs = {a.id, s.id}};
  node.requires_grad = requires_grad(a) || requires_grad(s);
  return push(std::move(node), std::move(out));
}

Var Tape::softmax(Var a) {
  const Tensor& in = value(a);
  Tensor out(in.shape(), 0.0);
  const std::size_t n = in.last_dim();
  const std::size_t rows = in.rows();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  // Very negative inputs take a slow denormal path in the vectorized exp, so
  // masked entries are parked at 0 and zeroed after the exp.
  const double* src = in.data().data();
  double* p = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    ConstMapArr irow(src + r * n, static_cast<Eigen::Index>(n));
    MapArr row(p + r * n, static_cast<Eigen::Index>(n));
    const double mx = irow.maxCoeff();
    row = (irow == kNegInf).select(0.0, irow - mx);
  }
  const auto total_n = static_cast<Eigen::Index>(out.numel());
  MapArr all(p, total_n);
  all = all.exp();
  for (Eigen::Index i = 0; i < total_n; ++i) {
    if (src[i] == kNegInf) p[i] = 0.0;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = p + r * n;
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += row[j];
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
  }
  TapeNode node{.op = OpKind::Softmax, .inputs = {a.id}};
  node.requires_grad = requires_grad(a);
  return push(std::move(node), std::move(out));
}

Var Tape::causal_mask(Var a) {
  const Tensor& A = value(a);
  if (A.rank() < 2 || A.dim(A.rank() - 1) != A.dim(A.rank() - 2)) {
    throw ShapeError("causal_mask: trailing axes must be square, got " + shape_str(A.shape()));
  }
  Tensor out = A;
  const std::size_t s = A.last_dim();
  const std::size_t mats = A.numel() / (s * s);
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < mats; ++m) {
    double* base = out.data().data() + m * s * s;
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = i + 1; j < s; ++j) base[i * s + j] = kNegInf;
    }
  }
  TapeNode node{.op = OpKind::CausalMask, .inputs = {a.id}};
  node.requires_grad = requires_grad(a);
  return push(std::move(node), std::move(out));
}

Var Tape::rms_norm(Var x, Var gain, double eps) {
  const Tensor& X = value(x);
  const Tensor& G = value(gain);
  if (G.rank() != 1 || G.dim(0) != X.last_dim()) shape_fail("rms_norm", X.shape(), G.shape());
  const std::size_t d = X.last_dim();
  const std::size_t rows = X.rows();
  Tensor out(X.shape());
  Tensor inv_rms({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv * G[j];
  }
  TapeNode node{.op = OpKind::RmsNorm, .inputs = {x.id, gain.id}};
  node.requires_grad = requires_grad(x) || requires_grad(gain);
  if (node.requires_grad) node.saved.push_back(std::move(inv_rms));
  return push(std::move(node), std::move(out));
}

// tanh(u) = 1 - 2 / (exp(2u) + 1), evaluated with vectorized exp.
static Eigen::ArrayXd gelu_tanh(const Tensor& x) {
  const ConstMapArr v(x.data().data(), static_cast<Eigen::Index>(x.numel()));
  const Eigen::ArrayXd u = kGeluC * (v + kGeluK * v.cube());
  return 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
}

Var Tape::gelu(Var x) {
  const Tensor& X = value(x);
  Tensor out(X.shape());
  const ConstMapArr v(X.data().data(), static_cast<Eigen::Index>(X.numel()));
  MapArr(out.data().data(), static_cast<Eigen::Index>(X.numel())) = 0.5 * v * (1.0 + gelu_tanh(X));
  TapeNode node{.op = OpKind::Gelu, .inputs = {x.id}};
  node.requires_grad = requires_grad(x);
  return push(std::move(node), std::move(out));
}

Var Tape::embedding(Var table, std::span<const int> ids, const Shape& prefix) {
  const Tensor& T = value(table);
  if (T.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(T.shape()));
  if (shape_numel(prefix) != ids.size()) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids do not fill " +
                     shape_str(prefix));
  }
  const std::size_t vocab = T.dim(0), d = T.dim(1);
  Shape out_shape = prefix;
  out_shape.push_back(d);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(id) + " at position " +
                              std::to_string(i) + " outside vocab of " +
                              std::to_string(vocab));
    }
    std::copy_n(T.data().data() + static_cast<std::size_t>(id) * d, d,
                out.data().data() + i * d);
  }
  TapeNode node{.op = OpKind::Embedding, .inputs = {table.id}};
  node.indices.assign(ids.begin(), ids.end());
  node.requires_grad = requires_grad(table);
  return push(std::move(node), std::move(out));
}

Var Tape::cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& Z = value(logits);
  const std::size_t v = Z.last_dim();
  const std::size_t rows = Z.rows();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(Z.shape()));
  }
  Tensor probs(Shape{rows, v});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " at position " + std::to_string(r) + " outside vocab");
    }
    const double* z = Z.data().data() + r * v;
    const double mx = *std::max_element(z, z + v);
    double se = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(z[j] - mx);
      se += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= se;
    total += std::log(se) + mx - z[t];
  }
  TapeNode node{.op = OpKind::CrossEntropy, .inputs = {logits.id}};
  node.indices.assign(targets.begin(), targets.end());
  node.requires_grad = requires_grad(logits);
  if (node.requires_grad) node.saved.push_back(std::move(probs));
  return push(std::move(node), Tensor::scalar(total / static_cast<double>(rows)));
}

Var Tape::reshape(Var a, Shape shape) {
  Tensor out = value(a).reshaped(std::move(shape));
  TapeNode node{.op = OpKind::Reshape, .inputs = {a.id}};
  node.requires_grad = requires_grad(a);
  return push(std::move(node), std::move(out));
}

Var Tape::transpose12(Var a) {
  const Tensor& A = value(a);
  if (A.rank() != 4) throw ShapeError("transpose12: expected 4-D, got " + shape_str(A.shape()));
  const std::size_t n0 = A.dim(0), n1 = A.dim(1), n2 = A.dim(2), n3 = A.dim(3);
  Tensor out({n0, n2, n1, n3});
  for (std::size_t i = 0; i < n0; ++i)
    for (std::size_t j = 0; j < n1; ++j)
      for (std::size_t k = 0; k < n2; ++k)
        std::copy_n(A.data().data() + ((i * n1 + j) * n2 + k) * n3, n3,
                    out.data().data() + ((i * n2 + k) * n1 + j) * n3);
  TapeNode node{.op = OpKind::Transpose12, .inputs = {a.id}};
  node.requires_grad = requires_grad(a);
  return push(std::move(node), std::move(out));
}

Var Tape::slice_last(Var a, std::size_t offset, std::size_t length) {
  const Tensor& A = value(a);
  const std::size_t n = A.last_dim();
  if (length == 0 || offset + length > n) {
    throw ShapeError("slice_last: range [" + std::to_string(offset) + ", " +
                     std::to_string(offset + length) + ") outside " + shape_str(A.shape()));
  }
  Shape out_shape = A.shape();
  out_shape.back() = length;
  Tensor out(out_shape);
  const std::size_t rows = A.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(A.data().data() + r * n + offset, length, out.data().data() + r * length);
  }
  TapeNode node{.op = OpKind::SliceLast, .inputs = {a.id}};
  node.offset = offset;
  node.requires_grad = requires_grad(a);
  return push(std::move(node), std::move(out));
}

Var Tape::sum(Var a) {
  double total = 0.0;
  for (double v : value(a).data()) total += v;
  TapeNode node{.op = OpKind::Sum, .inputs = {a.id}};
  node.requires_grad = requires_grad(a);
  return push(std::move(node), Tensor::scalar(total));
}

Var Tape::gate(Var alpha, double eps, GateGradient grad) {
  if (!(eps > 0.0)) throw std::invalid_argument("gate: eps must be > 0");
  Tensor out = value(alpha);
  for (auto& v : out.data()) v = gate_value(v, eps);
  TapeNode node{.op = OpKind::Gate, .inputs = {alpha.id}};
  node.scalar = eps;
  node.flag = grad == GateGradient::Printed;
  node.requires_grad = requires_grad(alpha);
  return push(std::move(node), std::move(out));
}

Var Tape::kl_div(const Tensor& target, Var probs) {
  const Tensor& P = value(probs);
  if (P.shape() != target.shape()) shape_fail("kl_div", target.shape(), P.shape());
  TapeNode node{.op = OpKind::KlDiv, .inputs = {probs.id}};
  node.requires_grad = requires_grad(probs);
  node.saved.push_back(target);
  return push(std::move(node), Tensor::scalar(kl_divergence_rows(target, P)));
}

// ---------------------------------------------------------------------------

GradMap Tape::backward(Var loss) const {
  check(loss);
  if (value(loss).numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(value(loss).shape()));
  }
  GradMap result;
  for (const auto& n : nodes_) {
    if (n.op == OpKind::Leaf && n.requires_grad) result.emplace(n.name, Tensor());
  }
  std::vector<Tensor> grads(nodes_.size());
  std::vector<bool> has(nodes_.size(), false);

  auto accum = [&](std::size_t id) -> Tensor& {
    if (!has[id]) {
      grads[id] = Tensor(value(Var{id}).shape(), 0.0);
      has[id] = true;
    }
    return grads[id];
  };

  if (nodes_[loss.id].requires_grad) {
    accum(loss.id)[0] = 1.0;
  }

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (!has[id]) continue;
    const TapeNode& node = nodes_[id];
    const Tensor& gy = grads[id];
    auto needs = [&](std::size_t k) { return nodes_[node.inputs[k]].requires_grad; };
    auto in_val = [&](std::size_t k) -> const Tensor& { return value(Var{node.inputs[k]}); };

    switch (node.op) {
      case OpKind::Leaf:
        break;
      case OpKind::MatMul: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        const std::size_t m = A.rows(), k = B.dim(0), n = B.dim(1);
        if (needs(0)) {
          as_mat(accum(node.inputs[0]).data().data(), m, k).noalias() +=
              as_mat(gy.data().data(), m, n) * as_mat(B.data().data(), k, n).transpose();
        }
        if (needs(1)) {
          as_mat(accum(node.inputs[1]).data().data(), k, n).noalias() +=
              as_mat(A.data().data(), m, k).transpose() * as_mat(gy.data().data(), m, n);
        }
        break;
      }
      case OpKind::BatchMatMul: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        const bool tb = node.flag;
        const std::size_t batch = A.dim(0), m = A.dim(1), k = A.dim(2);
        const std::size_t n = tb ? B.dim(1) : B.dim(2);
        double* ga = needs(0) ? accum(node.inputs[0]).data().data() : nullptr;
        double* gb = needs(1) ? accum(node.inputs[1]).data().data() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
          auto g = as_mat(gy.data().data() + i * m * n, m, n);
          auto am = as_mat(A.data().data() + i * m * k, m, k);
          if (tb) {
            auto bm = as_mat(B.data().data() + i * n * k, n, k);
            if (ga) as_mat(ga + i * m * k, m, k).noalias() += g * bm;
            if (gb) as_mat(gb + i * n * k, n, k).noalias() += g.transpose() * am;
          } else {
            auto bm = as_mat(B.data().data() + i * k * n, k, n);
            if (ga) as_mat(ga + i * m * k, m, k).noalias() += g * bm.transpose();
            if (gb) as_mat(gb + i * k * n, k, n).noalias() += am.transpose() * g;
          }
        }
        break;
      }
      case OpKind::Add: {
        if (needs(0)) {
          Tensor& ga = accum(node.inputs[0]);
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i];
        }
        if (needs(1)) {
          Tensor& gb = accum(node.inputs[1]);
          const std::size_t n = gb.numel();
          for (std::size_t i = 0; i < gy.numel(); ++i) gb[i % n] += gy[i];
        }
        break;
      }
      case OpKind::Mul: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        const std::size_t n = B.numel();
        if (needs(0)) {
          Tensor& ga = accum(node.inputs[0]);
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i] * B[i % n];
        }
        if (needs(1)) {
          Tensor& gb = accum(node.inputs[1]);
          for (std::size_t i = 0; i < gy.numel(); ++i) gb[i % n] += gy[i] * A[i];
        }
        break;
      }
      case OpKind::ScaleConst: {
        if (needs(0)) {
          Tensor& ga = accum(node.inputs[0]);
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i] * node.scalar;
        }
        break;
      }
      case OpKind::ScaleBy: {
        const Tensor& A = in_val(0);
        const double f = in_val(1)[0];
        if (needs(0)) {
          Tensor& ga = accum(node.inputs[0]);
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i] * f;
        }
        if (needs(1)) {
          double dot = 0.0;
          for (std::size_t i = 0; i < gy.numel(); ++i) dot += gy[i] * A[i];
          accum(node.inputs[1])[0] += dot;
        }
        break;
      }
      case OpKind::Softmax: {
        if (!needs(0)) break;
        const Tensor& Y = value(Var{id});
        Tensor& ga = accum(node.inputs[0]);
        const std::size_t n = Y.last_dim();
        for (std::size_t r = 0; r < Y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gy[r * n + j] * Y[r * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            ga[r * n + j] += Y[r * n + j] * (gy[r * n + j] - dot);
          }
        }
        break;
      }
      case OpKind::CausalMask: {
        if (!needs(0)) break;
        Tensor& ga = accum(node.inputs[0]);
        const std::size_t s = gy.last_dim();
        const std::size_t mats = gy.numel() / (s * s);
        for (std::size_t m = 0; m < mats; ++m)
          for (std::size_t i = 0; i < s; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
              const std::size_t at = m * s * s + i * s + j;
              ga[at] += gy[at];
            }
        break;
      }
      case OpKind::RmsNorm: {
        const Tensor& X = in_val(0);
        const Tensor& G = in_val(1);
        const Tensor& inv_rms = node.saved[0];
        const std::size_t d = X.last_dim();
        Tensor* gx = needs(0) ? &accum(node.inputs[0]) : nullptr;
        Tensor* gg = needs(1) ? &accum(node.inputs[1]) : nullptr;
        for (std::size_t r = 0; r < X.rows(); ++r) {
          const double inv = inv_rms[r];
          const double* xr = X.data().data() + r * d;
          const double* gr = gy.data().data() + r * d;
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double xhat = xr[j] * inv;
            if (gg) (*gg)[j] += gr[j] * xhat;
            dot += gr[j] * G[j] * xhat;
          }
          if (gx) {
            const double mean_dot = dot / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double xhat = xr[j] * inv;
              (*gx)[r * d + j] += inv * (gr[j] * G[j] - xhat * mean_dot);
            }
          }
        }
        break;
      }
      case OpKind::Gelu: {
        if (!needs(0)) break;
        const Tensor& X = in_val(0);
        const auto n = static_cast<Eigen::Index>(X.numel());
        const ConstMapArr v(X.data().data(), n);
        const Eigen::ArrayXd t = gelu_tanh(X);
        const Eigen::ArrayXd du = kGeluC * (1.0 + 3.0 * kGeluK * v.square());
        MapArr(accum(node.inputs[0]).data().data(), n) +=
            ConstMapArr(gy.data().data(), n) * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t.square()) * du);
        break;
      }
      case OpKind::Embedding: {
        if (!needs(0)) break;
        Tensor& gt = accum(node.inputs[0]);
        const std::size_t d = gt.dim(1);
        for (std::size_t i = 0; i < node.indices.size(); ++i) {
          double* row = gt.data().data() + static_cast<std::size_t>(node.indices[i]) * d;
          for (std::size_t j = 0; j < d; ++j) row[j] += gy[i * d + j];
        }
        break;
      }
      case OpKind::CrossEntropy: {
        if (!needs(0)) break;
        const Tensor& probs = node.saved[0];
        Tensor& gz = accum(node.inputs[0]);
        const std::size_t v = probs.dim(1);
        const std::size_t rows = probs.dim(0);
        const double scale = gy[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < v; ++j) gz[r * v + j] += scale * probs[r * v + j];
          gz[r * v + static_cast<std::size_t>(node.indices[r])] -= scale;
        }
        break;
      }
      case OpKind::Reshape: {
        if (!needs(0)) break;
        Tensor& ga = accum(node.inputs[0]);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i];
        break;
      }
      case OpKind::Transpose12: {
        if (!needs(0)) break;
        Tensor& ga = accum(node.inputs[0]);
        const std::size_t n0 = ga.dim(0), n1 = ga.dim(1), n2 = ga.dim(2), n3 = ga.dim(3);
        for (std::size_t i = 0; i < n0; ++i)
          for (std::size_t j = 0; j < n1; ++j)
            for (std::size_t k = 0; k < n2; ++k) {
              const double* src = gy.data().data() + ((i * n2 + k) * n1 + j) * n3;
              double* dst = ga.data().data() + ((i * n1 + j) * n2 + k) * n3;
              for (std::size_t e = 0; e < n3; ++e) dst[e] += src[e];
            }
        break;
      }
      case OpKind::SliceLast: {
        if (!needs(0)) break;
        Tensor& ga = accum(node.inputs[0]);
        const std::size_t n = ga.last_dim();
        const std::size_t len = gy.last_dim();
        for (std::size_t r = 0; r < gy.rows(); ++r)
          for (std::size_t j = 0; j < len; ++j) ga[r * n + node.offset + j] += gy[r * len + j];
        break;
      }
      case OpKind::Sum: {
        if (!needs(0)) break;
        Tensor& ga = accum(node.inputs[0]);
        for (auto& v : ga.data()) v += gy[0];
        break;
      }
      case OpKind::Gate: {
        if (!needs(0)) break;
        const Tensor& X = in_val(0);
        Tensor& ga = accum(node.inputs[0]);
        for (std::size_t i = 0; i < X.numel(); ++i) {
          const double d = node.flag ? gate_derivative_printed(X[i], node.scalar)
                                     : gate_derivative(X[i], node.scalar);
          ga[i] += gy[i] * d;
        }
        break;
      }
      case OpKind::KlDiv: {
        if (!needs(0)) break;
        const Tensor& target = node.saved[0];
        const Tensor& P = in_val(0);
        Tensor& gp = accum(node.inputs[0]);
        const double scale = gy[0] / static_cast<double>(P.rows());
        for (std::size_t i = 0; i < P.numel(); ++i) {
          if (target[i] > 0.0) gp[i] -= scale * target[i] / P[i];
        }
        break;
      }
    }
  }

  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const TapeNode& n = nodes_[id];
    if (n.op != OpKind::Leaf || !n.requires_grad) continue;
    result[n.name] = has[id] ? grads[id] : Tensor(value(Var{id}).shape(), 0.0);
  }
  return result;
}

}  // namespace foldlab
