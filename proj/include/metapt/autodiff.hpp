// SPDX-License-Identifier: Apache-2.0
//
// Dense reverse-mode automatic differentiation over Eigen matrices.
//
// Every tensor is a 2-D row-major matrix (scalars are 1x1). Operations are
// recorded into a graph whose nodes carry a global creation sequence number;
// reverse accumulation visits nodes in decreasing sequence order, which is a
// valid topological order and fixes the adjoint summation order.
//
// Backward rules are written in terms of the same differentiable primitives,
// so a gradient computed with `create_graph = true` is itself a recorded
// expression and can be differentiated again.
#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metapt/errors.hpp"

namespace metapt::ad {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

namespace detail {

inline std::atomic<std::uint64_t>& sequence_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Whether newly created operations are recorded for differentiation on the
/// calling thread.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// RAII switch for graph recording on the current thread.
class GradMode {
 public:
  explicit GradMode(bool enabled) : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = enabled;
  }
  ~GradMode() { detail::grad_mode_flag() = previous_; }
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

 private:
  bool previous_;
};

struct NoGrad : GradMode {
  NoGrad() : GradMode(false) {}
};

template <typename Scalar>
class Tensor;

template <typename Scalar>
struct Node {
  using Backward = std::function<std::vector<Tensor<Scalar>>(
      const std::vector<Tensor<Scalar>>& inputs, const Tensor<Scalar>& output,
      const Tensor<Scalar>& grad_output)>;

  Mat<Scalar> value;
  std::vector<Tensor<Scalar>> inputs;
  Backward backward;
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  const char* op = "leaf";
};

template <typename Scalar>
class Tensor {
 public:
  using NodeType = Node<Scalar>;
  using Matrix = Mat<Scalar>;

  Tensor() = default;

  static Tensor constant(Matrix value) { return make_leaf(std::move(value), false); }
  static Tensor parameter(Matrix value) { return make_leaf(std::move(value), true); }
  static Tensor scalar(Scalar v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }
  static Tensor zeros(Index rows, Index cols) { return constant(Matrix::Zero(rows, cols)); }

  /// Builds an operation node. Inputs and the backward rule are kept only
  /// when recording is enabled and some input requires a gradient.
  static Tensor make_op(Matrix value, std::vector<Tensor> inputs,
                        typename NodeType::Backward backward, const char* op) {
    if (!value.allFinite()) {
      throw NumericError(std::string("non-finite forward value in op '") + op + "'");
    }
    auto node = std::make_shared<NodeType>();
    node->value = std::move(value);
    node->op = op;
    node->sequence = detail::sequence_counter().fetch_add(1, std::memory_order_relaxed);
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
      node->requires_grad = true;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }
  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor");
    return node_->value(0, 0);
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  const char* op() const { return node_->op; }

  /// In-place access for leaves (optimizer updates). Must not be used while a
  /// graph referencing this leaf is being differentiated.
  Matrix& mutable_value() {
    if (!is_leaf()) throw ContractError("mutable_value() on a non-leaf tensor");
    return node_->value;
  }

  /// Same value, cut from the graph.
  Tensor detach() const { return constant(node_->value); }

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static Tensor make_leaf(Matrix value, bool requires_grad) {
    if (!value.allFinite()) throw NumericError("non-finite value in leaf tensor");
    auto node = std::make_shared<NodeType>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    node->sequence = detail::sequence_counter().fetch_add(1, std::memory_order_relaxed);
    return Tensor(std::move(node));
  }

  std::shared_ptr<NodeType> node_;
};

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {
inline void require_same_shape(const auto& a, const auto& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}
}  // namespace detail

template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, S c);
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> transpose(const Tensor<S>& a);
template <typename S> Tensor<S> reshape(const Tensor<S>& a, Index rows, Index cols);
template <typename S> Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts);
template <typename S> Tensor<S> slice_rows(const Tensor<S>& a, Index start, Index count);
template <typename S> Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<Index>& idx);
template <typename S>
Tensor<S> scatter_add_rows(const Tensor<S>& src, const std::vector<Index>& idx, Index rows);
template <typename S> Tensor<S> sum(const Tensor<S>& a);
template <typename S> Tensor<S> broadcast_to(const Tensor<S>& scalar, Index rows, Index cols);
template <typename S> Tensor<S> sum_rows(const Tensor<S>& a);
template <typename S> Tensor<S> broadcast_rows(const Tensor<S>& row, Index rows);
template <typename S> Tensor<S> sum_cols(const Tensor<S>& a);
template <typename S> Tensor<S> broadcast_cols(const Tensor<S>& col, Index cols);
template <typename S> Tensor<S> exp(const Tensor<S>& a);
template <typename S> Tensor<S> inv_sqrt(const Tensor<S>& a);
template <typename S> Tensor<S> relu(const Tensor<S>& a);
template <typename S> Tensor<S> gelu(const Tensor<S>& a);
template <typename S> Tensor<S> softmax(const Tensor<S>& a);
template <typename S> Tensor<S> log_softmax(const Tensor<S>& a);

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  return Tensor<S>::make_op(
      a.value() + b.value(), {a, b},
      [](const auto&, const auto&, const Tensor<S>& g) { return std::vector<Tensor<S>>{g, g}; },
      "add");
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  return Tensor<S>::make_op(
      a.value() - b.value(), {a, b},
      [](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{g, scale(g, S(-1))};
      },
      "sub");
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  return Tensor<S>::make_op(
      a.value().cwiseProduct(b.value()), {a, b},
      [](const std::vector<Tensor<S>>& in, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{in[0].requires_grad() ? mul(g, in[1]) : Tensor<S>{},
                                      in[1].requires_grad() ? mul(g, in[0]) : Tensor<S>{}};
      },
      "mul");
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return Tensor<S>::make_op(
      a.value() * factor, {a},
      [factor](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{scale(g, factor)};
      },
      "scale");
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return Tensor<S>::make_op(
      (a.value().array() + c).matrix(), {a},
      [](const auto&, const auto&, const Tensor<S>& g) { return std::vector<Tensor<S>>{g}; },
      "add_scalar");
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + " differ");
  }
  return Tensor<S>::make_op(
      a.value() * b.value(), {a, b},
      [](const std::vector<Tensor<S>>& in, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{
            in[0].requires_grad() ? matmul(g, transpose(in[1])) : Tensor<S>{},
            in[1].requires_grad() ? matmul(transpose(in[0]), g) : Tensor<S>{}};
      },
      "matmul");
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  return Tensor<S>::make_op(
      a.value().transpose(), {a},
      [](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{transpose(g)};
      },
      "transpose");
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Index rows, Index cols) {
  if (rows * cols != a.size()) throw ShapeError("reshape: element count changes");
  // Row-major storage makes reshape a reinterpretation of the buffer.
  Mat<S> out = Eigen::Map<const Mat<S>>(a.value().data(), rows, cols);
  const Index r0 = a.rows(), c0 = a.cols();
  return Tensor<S>::make_op(
      std::move(out), {a},
      [r0, c0](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{reshape(g, r0, c0)};
      },
      "reshape");
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Mat<S> out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return Tensor<S>::make_op(
      std::move(out), parts,
      [offsets](const std::vector<Tensor<S>>& in, const auto&, const Tensor<S>& g) {
        std::vector<Tensor<S>> grads(in.size());
        for (std::size_t i = 0; i < in.size(); ++i) {
          if (in[i].requires_grad()) grads[i] = slice_rows(g, offsets[i], in[i].rows());
        }
        return grads;
      },
      "concat_rows");
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  const Index total = a.rows(), cols = a.cols();
  return Tensor<S>::make_op(
      a.value().middleRows(start, count), {a},
      [start, count, total, cols](const auto&, const auto&, const Tensor<S>& g) {
        std::vector<Tensor<S>> parts;
        if (start > 0) parts.push_back(Tensor<S>::zeros(start, cols));
        parts.push_back(g);
        if (total - start - count > 0) parts.push_back(Tensor<S>::zeros(total - start - count, cols));
        return std::vector<Tensor<S>>{parts.size() == 1 ? g : concat_rows(parts)};
      },
      "slice_rows");
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<Index>& idx) {
  Mat<S> out(static_cast<Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = table.value().row(idx[i]);
  }
  const Index rows = table.rows();
  return Tensor<S>::make_op(
      std::move(out), {table},
      [idx, rows](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{scatter_add_rows(g, idx, rows)};
      },
      "gather_rows");
}

template <typename S>
Tensor<S> scatter_add_rows(const Tensor<S>& src, const std::vector<Index>& idx, Index rows) {
  if (static_cast<Index>(idx.size()) != src.rows()) throw ShapeError("scatter_add_rows: index count");
  Mat<S> out = Mat<S>::Zero(rows, src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(idx[i]) += src.value().row(static_cast<Index>(i));
  return Tensor<S>::make_op(
      std::move(out), {src},
      [idx](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{gather_rows(g, idx)};
      },
      "scatter_add_rows");
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return Tensor<S>::make_op(
      std::move(out), {a},
      [r, c](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{broadcast_to(g, r, c)};
      },
      "sum");
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& scalar, Index rows, Index cols) {
  if (scalar.size() != 1) throw ShapeError("broadcast_to: input must be 1x1");
  return Tensor<S>::make_op(
      Mat<S>::Constant(rows, cols, scalar.value()(0, 0)), {scalar},
      [](const auto&, const auto&, const Tensor<S>& g) { return std::vector<Tensor<S>>{sum(g)}; },
      "broadcast_to");
}

template <typename S>
Tensor<S> sum_rows(const Tensor<S>& a) {
  const Index r = a.rows();
  return Tensor<S>::make_op(
      a.value().colwise().sum(), {a},
      [r](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{broadcast_rows(g, r)};
      },
      "sum_rows");
}

template <typename S>
Tensor<S> broadcast_rows(const Tensor<S>& row, Index rows) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows: input must be a row vector");
  return Tensor<S>::make_op(
      row.value().replicate(rows, 1), {row},
      [](const auto&, const auto&, const Tensor<S>& g) { return std::vector<Tensor<S>>{sum_rows(g)}; },
      "broadcast_rows");
}

template <typename S>
Tensor<S> sum_cols(const Tensor<S>& a) {
  const Index c = a.cols();
  return Tensor<S>::make_op(
      a.value().rowwise().sum(), {a},
      [c](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{broadcast_cols(g, c)};
      },
      "sum_cols");
}

template <typename S>
Tensor<S> broadcast_cols(const Tensor<S>& col, Index cols) {
  if (col.cols() != 1) throw ShapeError("broadcast_cols: input must be a column vector");
  return Tensor<S>::make_op(
      col.value().replicate(1, cols), {col},
      [](const auto&, const auto&, const Tensor<S>& g) { return std::vector<Tensor<S>>{sum_cols(g)}; },
      "broadcast_cols");
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return Tensor<S>::make_op(
      a.value().array().exp().matrix(), {a},
      [](const auto&, const Tensor<S>& out, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{mul(g, out)};
      },
      "exp");
}

template <typename S>
Tensor<S> inv_sqrt(const Tensor<S>& a) {
  return Tensor<S>::make_op(
      a.value().array().rsqrt().matrix(), {a},
      [](const auto&, const Tensor<S>& out, const Tensor<S>& g) {
        // d/dx x^{-1/2} = -1/2 x^{-3/2}
        return std::vector<Tensor<S>>{mul(g, scale(mul(out, mul(out, out)), S(-0.5)))};
      },
      "inv_sqrt");
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  Mat<S> step = (a.value().array() > S(0)).template cast<S>().matrix();
  return Tensor<S>::make_op(
      a.value().cwiseMax(S(0)), {a},
      [step = std::move(step)](const auto&, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{mul(g, Tensor<S>::constant(step))};
      },
      "relu");
}

namespace detail {

// k-th derivative of the exact GELU x * Phi(x). For k >= 2 it is
// phi(x) * poly_k(x) with poly_2 = 2 - x^2 and poly_{k+1} = poly_k' - x poly_k.
template <typename S>
Mat<S> gelu_derivative(const Mat<S>& x, int order) {
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  const S inv_sqrt_2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
  auto phi = [&](S v) { return inv_sqrt_2pi * std::exp(-S(0.5) * v * v); };
  auto cdf = [&](S v) { return S(0.5) * std::erfc(-v * inv_sqrt2); };
  Mat<S> out(x.rows(), x.cols());
  if (order == 0) {
    for (Index i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * cdf(x.data()[i]);
    return out;
  }
  if (order == 1) {
    for (Index i = 0; i < x.size(); ++i) {
      const S v = x.data()[i];
      out.data()[i] = cdf(v) + v * phi(v);
    }
    return out;
  }
  std::vector<S> poly{S(2), S(0), S(-1)};  // coefficients, lowest degree first
  for (int k = 2; k < order; ++k) {
    std::vector<S> next(poly.size() + 1, S(0));
    for (std::size_t d = 1; d < poly.size(); ++d) next[d - 1] += S(d) * poly[d];
    for (std::size_t d = 0; d < poly.size(); ++d) next[d + 1] -= poly[d];
    poly = std::move(next);
  }
  for (Index i = 0; i < x.size(); ++i) {
    const S v = x.data()[i];
    S p = 0;
    for (auto it = poly.rbegin(); it != poly.rend(); ++it) p = p * v + *it;
    out.data()[i] = phi(v) * p;
  }
  return out;
}

template <typename S>
Tensor<S> gelu_order(const Tensor<S>& a, int order) {
  return Tensor<S>::make_op(
      gelu_derivative(a.value(), order), {a},
      [order](const std::vector<Tensor<S>>& in, const auto&, const Tensor<S>& g) {
        return std::vector<Tensor<S>>{mul(g, gelu_order(in[0], order + 1))};
      },
      order == 0 ? "gelu" : "gelu_derivative");
}

}  // namespace detail

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  return detail::gelu_order(a, 0);
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& a) {
  Mat<S> out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    const S m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return Tensor<S>::make_op(
      std::move(out), {a},
      [](const auto&, const Tensor<S>& y, const Tensor<S>& g) {
        // dx = y * (g - rowsum(g * y))
        auto inner = broadcast_cols(sum_cols(mul(g, y)), y.cols());
        return std::vector<Tensor<S>>{mul(y, sub(g, inner))};
      },
      "softmax");
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& a) {
  Mat<S> out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    const S m = out.row(r).maxCoeff();
    const S lse = m + std::log((out.row(r).array() - m).exp().sum());
    out.row(r).array() -= lse;
  }
  return Tensor<S>::make_op(
      std::move(out), {a},
      [](const auto&, const Tensor<S>& y, const Tensor<S>& g) {
        // dx = g - softmax(x) * rowsum(g)
        auto total = broadcast_cols(sum_cols(g), y.cols());
        return std::vector<Tensor<S>>{sub(g, mul(exp(y), total))};
      },
      "log_softmax");
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

/// Adds a 1 x cols row vector to every row of `a`.
template <typename S>
Tensor<S> add_row(const Tensor<S>& a, const Tensor<S>& row) {
  return add(a, broadcast_rows(row, a.rows()));
}

/// Row-wise layer normalization with learned gain and bias (both 1 x cols).
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5)) {
  const Index d = x.cols();
  const S inv_d = S(1) / static_cast<S>(d);
  auto mu = scale(sum_cols(x), inv_d);
  auto centered = sub(x, broadcast_cols(mu, d));
  auto var = scale(sum_cols(mul(centered, centered)), inv_d);
  auto inv_std = inv_sqrt(add_scalar(var, eps));
  auto normed = mul(centered, broadcast_cols(inv_std, d));
  return add_row(mul(normed, broadcast_rows(gain, x.rows())), bias);
}

/// Selects element (r, c) as a 1x1 tensor, through transpose + row gather.
template <typename S>
Tensor<S> pick(const Tensor<S>& a, Index r, Index c) {
  auto row = a.rows() == 1 ? a : gather_rows(a, {r});
  return gather_rows(transpose(row), {c});
}

/// Mean negative log-likelihood of `targets[i]` under row i of `log_probs`.
template <typename S>
Tensor<S> nll_loss(const Tensor<S>& log_probs, const std::vector<Index>& targets) {
  if (static_cast<Index>(targets.size()) != log_probs.rows()) throw ShapeError("nll_loss: target count");
  Mat<S> onehot = Mat<S>::Zero(log_probs.rows(), log_probs.cols());
  for (std::size_t i = 0; i < targets.size(); ++i) onehot(static_cast<Index>(i), targets[i]) = S(1);
  return scale(sum(mul(log_probs, Tensor<S>::constant(std::move(onehot)))),
               S(-1) / static_cast<S>(targets.size()));
}

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }
template <typename S> Tensor<S> operator*(S s, const Tensor<S>& a) { return scale(a, s); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, S s) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Reverse accumulation
// ---------------------------------------------------------------------------

/// Gradients of the scalar `loss` with respect to each of `params`.
///
/// A parameter that requires gradients but does not influence `loss` gets a
/// zero gradient. A tensor that does not require gradients (a constant or a
/// frozen weight) cannot be differentiated against and raises ContractError.
/// With `create_graph`, the returned gradients are recorded expressions.
template <typename S>
std::vector<Tensor<S>> grad(const Tensor<S>& loss, const std::vector<Tensor<S>>& params,
                            bool create_graph = false) {
  if (loss.size() != 1) throw ShapeError("grad: loss must be a scalar");
  for (const auto& p : params) {
    if (!p.requires_grad()) throw ContractError("grad: parameter is not part of a differentiable graph");
  }

  std::vector<Node<S>*> order;
  if (loss.requires_grad()) {
    std::unordered_map<const Node<S>*, bool> seen;
    std::vector<Node<S>*> stack{loss.node()};
    seen[loss.node()] = true;
    while (!stack.empty()) {
      Node<S>* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (const auto& in : n->inputs) {
        if (in.requires_grad() && !seen[in.node()]) {
          seen[in.node()] = true;
          stack.push_back(in.node());
        }
      }
    }
    std::sort(order.begin(), order.end(),
              [](const Node<S>* a, const Node<S>* b) { return a->sequence > b->sequence; });
  }

  std::unordered_map<const Node<S>*, Tensor<S>> adjoint;
  GradMode mode(create_graph);
  if (loss.requires_grad()) {
    adjoint[loss.node()] = Tensor<S>::constant(Mat<S>::Ones(1, 1));
    // A handle to the output is needed by rules that reuse the forward value.
    std::unordered_map<const Node<S>*, Tensor<S>> handles;
    handles[loss.node()] = loss;
    for (const auto& p : params) handles[p.node()] = p;
    for (Node<S>* n : order) {
      auto it = adjoint.find(n);
      if (it == adjoint.end() || !n->backward) continue;
      const Tensor<S> g = it->second;
      const Tensor<S>& self = handles.at(n);
      auto input_grads = n->backward(n->inputs, self, g);
      for (std::size_t i = 0; i < n->inputs.size(); ++i) {
        const auto& in = n->inputs[i];
        if (!in.requires_grad() || !input_grads[i].defined()) continue;
        if (!input_grads[i].value().allFinite()) throw NumericError("grad: non-finite adjoint");
        handles.try_emplace(in.node(), in);
        auto [slot, inserted] = adjoint.try_emplace(in.node(), input_grads[i]);
        if (!inserted) slot->second = add(slot->second, input_grads[i]);
      }
      // Free adjoints of interior nodes once consumed.
      if (n != loss.node()) {
        bool is_param = false;
        for (const auto& p : params) is_param = is_param || p.node() == n;
        if (!is_param) adjoint.erase(n);
      }
    }
  }

  std::vector<Tensor<S>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    auto it = adjoint.find(p.node());
    if (it == adjoint.end()) {
      out.push_back(Tensor<S>::zeros(p.rows(), p.cols()));
    } else {
      out.push_back(create_graph ? it->second : it->second.detach());
    }
  }
  return out;
}

/// Central-difference gradient estimate of `f` at `x`.
template <typename S, typename F>
Mat<S> finite_diff_grad(F&& f, const Mat<S>& x, S eps) {
  if (!(eps > S(0))) throw ContractError("finite_diff_grad: eps must be positive");
  Mat<S> g(x.rows(), x.cols());
  Mat<S> probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const S orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const S up = f(static_cast<const Mat<S>&>(probe));
    probe.data()[i] = orig - eps;
    const S down = f(static_cast<const Mat<S>&>(probe));
    probe.data()[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: function returned a non-finite value");
    }
    g.data()[i] = (up - down) / (S(2) * eps);
  }
  return g;
}

}  // namespace metapt::ad

namespace metapt {
using Tensor = ad::Tensor<double>;
using Matrix = ad::Mat<double>;
}  // namespace metapt
