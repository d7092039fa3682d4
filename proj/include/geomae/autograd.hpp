#pragma once

// Minimal tape-based reverse-mode differentiation over dense tensors.
// Nodes are appended in evaluation order, so reverse insertion order is a valid
// topological order for the backward sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "geomae/tensor.hpp"

namespace geomae {

template <class T>
class Tape;

template <class T>
class Var {
public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Shape& shape() const;
  const std::vector<T>& value() const;
  bool requires_grad() const;
  std::size_t size() const { return value().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  T item() const;
  Tensor<T> tensor() const { return Tensor<T>(shape(), value()); }

private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
public:
  using BackwardFn = std::function<void(Tape&)>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> t) { return push(std::move(t.shape), std::move(t.data), false); }
  Var<T> constant(Shape s, std::vector<T> v) { return push(std::move(s), std::move(v), false); }
  Var<T> variable(Tensor<T> t) { return push(std::move(t.shape), std::move(t.data), true); }

  /// Appends an op result; the backward closure is kept only when an input needs gradients.
  Var<T> emit(Shape s, std::vector<T> v, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || node(in).requires_grad;
    return emit_if(rg, std::move(s), std::move(v), std::move(fn));
  }

  Var<T> emit_if(bool requires_grad, Shape s, std::vector<T> v, BackwardFn fn) {
    if (numel(s) != v.size()) fail_usage("internal: op produced inconsistent shape " + shape_str(s));
    Var<T> out = push(std::move(s), std::move(v), requires_grad);
    if (requires_grad) nodes_.back().backward = std::move(fn);
    return out;
  }

  void backward(Var<T> root) {
    Node& r = node(root);
    if (r.value.size() != 1) fail_usage("backward requires a scalar root");
    grad_buffer(root.id())[0] += T(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this);
    }
  }

  Node& node(Var<T> v) { return nodes_[v.id()]; }
  const Node& node(Var<T> v) const { return nodes_[v.id()]; }
  const std::vector<T>& value(Var<T> v) const { return nodes_[v.id()].value; }

  /// Gradient storage for a node, allocated on first use.
  std::vector<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  /// Gradient accumulated so far (zeros when the node was never reached).
  std::vector<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? std::vector<T>(n.value.size(), T(0)) : n.grad;
  }

  bool needs_grad(Var<T> v) const { return nodes_[v.id()].requires_grad; }

  void add_macs(std::uint64_t n) { macs_ += n; }
  std::uint64_t macs() const noexcept { return macs_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

private:
  Var<T> push(Shape s, std::vector<T> v, bool requires_grad) {
    nodes_.push_back(Node{std::move(s), std::move(v), {}, requires_grad, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::uint64_t macs_ = 0;
};

template <class T>
const Shape& Var<T>::shape() const { return tape_->node(*this).shape; }
template <class T>
const std::vector<T>& Var<T>::value() const { return tape_->node(*this).value; }
template <class T>
bool Var<T>::requires_grad() const { return tape_->node(*this).requires_grad; }
template <class T>
T Var<T>::item() const {
  const auto& v = value();
  if (v.size() != 1) fail_usage("item() on non-scalar of shape " + shape_str(shape()));
  return v[0];
}

namespace ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {

// Decomposes a shape around `axis` into (outer, len, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) fail_usage("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) fail_usage("broadcast rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) out[i] = a[i];
    else if (a[i] == 1) out[i] = b[i];
    else fail_usage("incompatible broadcast " + shape_str(a) + " vs " + shape_str(b));
  }
  return out;
}

// For every flat index of `out`, the flat index into a tensor of shape `src` under broadcasting.
inline std::vector<std::size_t> broadcast_map(const Shape& src, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> src_stride(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = r; i-- > 0;) {
    src_stride[i] = src[i] == 1 ? 0 : stride;
    stride *= src[i];
  }
  std::vector<std::size_t> map(numel(out));
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    map[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      ++idx[i];
      off += src_stride[i];
      if (idx[i] < out[i]) break;
      off -= src_stride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return map;
}

template <class T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

enum class Binary { add, sub, mul };

template <class T>
Var<T> binary(Var<T> a, Var<T> b, Binary op) {
  auto& t = a.tape();
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
  const bool same = a.shape() == b.shape();
  std::vector<std::size_t> ma, mb;
  if (!same) {
    ma = detail::broadcast_map(a.shape(), out_shape);
    mb = detail::broadcast_map(b.shape(), out_shape);
  }
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(numel(out_shape));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = av[same ? i : ma[i]];
    const T y = bv[same ? i : mb[i]];
    out[i] = op == Binary::add ? x + y : op == Binary::sub ? x - y : x * y;
  }
  const std::size_t rid = t.node_count();
  return t.emit(out_shape, std::move(out), {a, b},
                [a, b, op, same, ma = std::move(ma), mb = std::move(mb), rid](Tape<T>& t) {
                  const auto& gy = t.grad_buffer(rid);
                  const auto& av = t.value(a);
                  const auto& bv = t.value(b);
                  if (t.needs_grad(a)) {
                    auto& ga = t.grad_buffer(a.id());
                    for (std::size_t i = 0; i < gy.size(); ++i) {
                      const std::size_t ia = same ? i : ma[i];
                      const std::size_t ib = same ? i : mb[i];
                      ga[ia] += op == Binary::mul ? gy[i] * bv[ib] : gy[i];
                    }
                  }
                  if (t.needs_grad(b)) {
                    auto& gb = t.grad_buffer(b.id());
                    for (std::size_t i = 0; i < gy.size(); ++i) {
                      const std::size_t ia = same ? i : ma[i];
                      const std::size_t ib = same ? i : mb[i];
                      gb[ib] += op == Binary::mul ? gy[i] * av[ia] : op == Binary::sub ? -gy[i] : gy[i];
                    }
                  }
                });
}

template <class T> Var<T> add(Var<T> a, Var<T> b) { return binary(a, b, Binary::add); }
template <class T> Var<T> sub(Var<T> a, Var<T> b) { return binary(a, b, Binary::sub); }
template <class T> Var<T> mul(Var<T> a, Var<T> b) { return binary(a, b, Binary::mul); }

/// y = f(x) elementwise; `df(x, y)` is the local derivative.
template <class T, class F, class DF>
Var<T> unary(Var<T> x, F f, DF df) {
  auto& t = x.tape();
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t rid = t.node_count();
  return t.emit(x.shape(), std::move(out), {x}, [x, df, rid](Tape<T>& t) {
    const auto& gy = t.grad_buffer(rid);
    const auto& xv = t.value(x);
    const auto& yv = t.node(Var<T>(&t, rid)).value;
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
  });
}

template <class T>
Var<T> scale(Var<T> x, T s) {
  return unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> gelu(Var<T> x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <class T>
Var<T> relu(Var<T> x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Logistic sigmoid clamped to the open interval (0, 1).
template <class T>
Var<T> sigmoid(Var<T> x) {
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  return unary(
      x,
      [=](T v) {
        const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        return std::clamp(s, lo, hi);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------- linear algebra

/// y = x W (+ b) over the trailing axis; x [..., in], W [in, out], b [out].
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b = {}) {
  auto& t = x.tape();
  const Shape& xs = x.shape();
  if (w.shape().size() != 2) fail_usage("linear weight must be rank 2");
  const std::size_t in = w.dim(0), outw = w.dim(1);
  if (xs.empty() || xs.back() != in)
    fail_usage("mlp dimension mismatch: input " + shape_str(xs) + " vs weight " + shape_str(w.shape()));
  if (b.valid() && (b.shape().size() != 1 || b.dim(0) != outw)) fail_usage("linear bias shape mismatch");
  const std::size_t rows = x.size() / in;
  Shape ys = xs;
  ys.back() = outw;
  std::vector<T> y(rows * outw);
  MapMat<T> Y(y.data(), rows, outw);
  CMapMat<T> X(x.value().data(), rows, in);
  CMapMat<T> W(w.value().data(), in, outw);
  Y.noalias() = X * W;
  if (b.valid()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B(b.value().data(), outw);
    Y.rowwise() += B;
  }
  t.add_macs(static_cast<std::uint64_t>(rows) * in * outw);
  const std::size_t rid = t.node_count();
  const bool rg = x.requires_grad() || w.requires_grad() || (b.valid() && b.requires_grad());
  return t.emit_if(rg, ys, std::move(y), [x, w, b, rows, in, outw, rid](Tape<T>& t) {
    CMapMat<T> GY(t.grad_buffer(rid).data(), rows, outw);
    if (t.needs_grad(x)) {
      MapMat<T> GX(t.grad_buffer(x.id()).data(), rows, in);
      GX.noalias() += GY * CMapMat<T>(t.value(w).data(), in, outw).transpose();
    }
    if (t.needs_grad(w)) {
      MapMat<T> GW(t.grad_buffer(w.id()).data(), in, outw);
      GW.noalias() += CMapMat<T>(t.value(x).data(), rows, in).transpose() * GY;
    }
    if (b.valid() && t.needs_grad(b)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(t.grad_buffer(b.id()).data(), outw);
      GB += GY.colwise().sum();
    }
  });
}

/// a [m,k] x b [k,n] -> [m,n]; with `transpose_b`, b is [n,k] and the product is a b^T.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_b = false) {
  auto& t = a.tape();
  if (a.shape().size() != 2 || b.shape().size() != 2) fail_usage("matmul expects rank-2 operands");
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  if (k != kb) fail_usage("matmul inner dimension mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> y(m * n);
  MapMat<T> Y(y.data(), m, n);
  CMapMat<T> A(a.value().data(), m, k);
  if (transpose_b) Y.noalias() = A * CMapMat<T>(b.value().data(), n, k).transpose();
  else Y.noalias() = A * CMapMat<T>(b.value().data(), k, n);
  t.add_macs(static_cast<std::uint64_t>(m) * k * n);
  const std::size_t rid = t.node_count();
  return t.emit({m, n}, std::move(y), {a, b}, [a, b, m, k, n, transpose_b, rid](Tape<T>& t) {
    CMapMat<T> GY(t.grad_buffer(rid).data(), m, n);
    if (t.needs_grad(a)) {
      MapMat<T> GA(t.grad_buffer(a.id()).data(), m, k);
      if (transpose_b) GA.noalias() += GY * CMapMat<T>(t.value(b).data(), n, k);
      else GA.noalias() += GY * CMapMat<T>(t.value(b).data(), k, n).transpose();
    }
    if (t.needs_grad(b)) {
      CMapMat<T> A(t.value(a).data(), m, k);
      if (transpose_b) {
        MapMat<T> GB(t.grad_buffer(b.id()).data(), n, k);
        GB.noalias() += GY.transpose() * A;
      } else {
        MapMat<T> GB(t.grad_buffer(b.id()).data(), k, n);
        GB.noalias() += A.transpose() * GY;
      }
    }
  });
}

template <class T>
Var<T> transpose2d(Var<T> x) {
  auto& t = x.tape();
  if (x.shape().size() != 2) fail_usage("transpose2d expects rank 2");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> y(r * c);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = xv[i * c + j];
  const std::size_t rid = t.node_count();
  return t.emit({c, r}, std::move(y), {x}, [x, r, c, rid](Tape<T>& t) {
    const auto& gy = t.grad_buffer(rid);
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[j * r + i];
  });
}

// ---------------------------------------------------------------- normalization

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  auto& t = x.tape();
  const std::size_t c = x.shape().back();
  if (gain.size() != c || bias.size() != c) fail_usage("layer norm parameter width mismatch");
  const std::size_t rows = x.size() / c;
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  std::vector<T> y(xv.size()), xhat(xv.size()), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(c);
    inv[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (row[j] - mean) * inv[r];
      y[r * c + j] = xhat[r * c + j] * gv[j] + bv[j];
    }
  }
  const std::size_t rid = t.node_count();
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return t.emit_if(rg, x.shape(), std::move(y),
                   [x, gain, bias, c, rows, xhat = std::move(xhat), inv = std::move(inv), rid](Tape<T>& t) {
                     const auto& gy = t.grad_buffer(rid);
                     const auto& gv = t.value(gain);
                     if (t.needs_grad(gain)) {
                       auto& gg = t.grad_buffer(gain.id());
                       for (std::size_t i = 0; i < gy.size(); ++i) gg[i % c] += gy[i] * xhat[i];
                     }
                     if (t.needs_grad(bias)) {
                       auto& gb = t.grad_buffer(bias.id());
                       for (std::size_t i = 0; i < gy.size(); ++i) gb[i % c] += gy[i];
                     }
                     if (t.needs_grad(x)) {
                       auto& gx = t.grad_buffer(x.id());
                       for (std::size_t r = 0; r < rows; ++r) {
                         T s1 = 0, s2 = 0;
                         for (std::size_t j = 0; j < c; ++j) {
                           const T dxh = gy[r * c + j] * gv[j];
                           s1 += dxh;
                           s2 += dxh * xhat[r * c + j];
                         }
                         for (std::size_t j = 0; j < c; ++j) {
                           const T dxh = gy[r * c + j] * gv[j];
                           gx[r * c + j] += inv[r] / T(c) * (T(c) * dxh - s1 - xhat[r * c + j] * s2);
                         }
                       }
                     }
                   });
}

/// Softmax over the trailing axis.
template <class T>
Var<T> softmax(Var<T> x) {
  auto& t = x.tape();
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  const auto& xv = x.value();
  std::vector<T> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mx = *std::max_element(row, row + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (y[r * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] /= s;
  }
  const std::size_t rid = t.node_count();
  return t.emit(x.shape(), std::move(y), {x}, [x, c, rows, rid](Tape<T>& t) {
    const auto& gy = t.grad_buffer(rid);
    const auto& yv = t.node(Var<T>(&t, rid)).value;
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += gy[r * c + j] * yv[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += yv[r * c + j] * (gy[r * c + j] - dot);
    }
  });
}

/// Divides each trailing-axis row by its sum (inputs are expected positive).
template <class T>
Var<T> l1_normalize(Var<T> x) {
  auto& t = x.tape();
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  const auto& xv = x.value();
  std::vector<T> y(xv.size()), sums(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += xv[r * c + j];
    sums[r] = s;
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = xv[r * c + j] / s;
  }
  const std::size_t rid = t.node_count();
  return t.emit(x.shape(), std::move(y), {x}, [x, c, rows, sums = std::move(sums), rid](Tape<T>& t) {
    const auto& gy = t.grad_buffer(rid);
    const auto& yv = t.node(Var<T>(&t, rid)).value;
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += gy[r * c + j] * yv[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += (gy[r * c + j] - dot) / sums[r];
    }
  });
}

// ---------------------------------------------------------------- reductions & layout

enum class Pool { max, mean };

/// Max or mean over `axis`. Max routes its gradient to the lowest index among ties.
template <class T>
Var<T> reduce(Var<T> x, std::size_t axis, Pool mode, bool keepdim = false) {
  auto& t = x.tape();
  const auto sp = detail::split_axis(x.shape(), axis);
  if (sp.len == 0) fail_usage("reduction over an empty axis");
  Shape ys = x.shape();
  if (keepdim) ys[axis] = 1;
  else ys.erase(ys.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto& xv = x.value();
  std::vector<T> y(sp.outer * sp.inner);
  std::vector<std::size_t> arg;
  if (mode == Pool::max) arg.resize(y.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      if (mode == Pool::max) {
        std::size_t best = 0;
        T bv = xv[base];
        for (std::size_t l = 1; l < sp.len; ++l) {
          const T v = xv[base + l * sp.inner];
          if (v > bv) {
            bv = v;
            best = l;
          }
        }
        y[o * sp.inner + i] = bv;
        arg[o * sp.inner + i] = base + best * sp.inner;
      } else {
        T s = 0;
        for (std::size_t l = 0; l < sp.len; ++l) s += xv[base + l * sp.inner];
        y[o * sp.inner + i] = s / T(sp.len);
      }
    }
  }
  const std::size_t rid = t.node_count();
  return t.emit(ys, std::move(y), {x}, [x, sp, mode, arg = std::move(arg), rid](Tape<T>& t) {
    const auto& gy = t.grad_buffer(rid);
    auto& gx = t.grad_buffer(x.id());
    if (mode == Pool::max) {
      for (std::size_t i = 0; i < gy.size(); ++i) gx[arg[i]] += gy[i];
    } else {
      const T inv = T(1) / T(sp.len);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
          for (std::size_t i = 0; i < sp.inner; ++i)
            gx[(o * sp.len + l) * sp.inner + i] += gy[o * sp.inner + i] * inv;
    }
  });
}

template <class T>
Var<T> sum_all(Var<T> x) {
  auto& t = x.tape();
  T s = 0;
  for (T v : x.value()) s += v;
  const std::size_t rid = t.node_count();
  return t.emit({1}, {s}, {x}, [x, rid](Tape<T>& t) {
    const T g = t.grad_buffer(rid)[0];
    for (auto& v : t.grad_buffer(x.id())) v += g;
  });
}

template <class T>
Var<T> mean_all(Var<T> x) {
  return scale(sum_all(x), T(1) / T(x.size()));
}

template <class T>
Var<T> reshape(Var<T> x, Shape s) {
  auto& t = x.tape();
  if (numel(s) != x.size()) fail_usage("reshape " + shape_str(x.shape()) + " -> " + shape_str(s));
  const std::size_t rid = t.node_count();
  return t.emit(std::move(s), x.value(), {x}, [x, rid](Tape<T>& t) {
    detail::accumulate(t.grad_buffer(x.id()), t.grad_buffer(rid));
  });
}

/// Broadcasts x (same rank, unit dims stretched) to `s`.
template <class T>
Var<T> expand(Var<T> x, Shape s) {
  auto& t = x.tape();
  detail::broadcast_shape(s, x.shape());
  auto map = detail::broadcast_map(x.shape(), s);
  const auto& xv = x.value();
  std::vector<T> y(map.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[map[i]];
  const std::size_t rid = t.node_count();
  return t.emit(std::move(s), std::move(y), {x}, [x, map = std::move(map), rid](Tape<T>& t) {
    const auto& gy = t.grad_buffer(rid);
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t i = 0; i < gy.size(); ++i) gx[map[i]] += gy[i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) fail_usage("concat of nothing");
  auto& t = xs.front().tape();
  Shape ys = xs.front().shape();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != ys.size()) fail_usage("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != ys[i]) fail_usage("concat shape mismatch " + shape_str(s) + " vs " + shape_str(ys));
    total += s[axis];
    rg = rg || x.requires_grad();
  }
  ys[axis] = total;
  const auto sp = detail::split_axis(ys, axis);
  std::vector<T> y(numel(ys));
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t len = x.dim(axis);
    const auto& xv = x.value();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  y.begin() + static_cast<std::ptrdiff_t>((o * sp.len + off) * sp.inner));
    off += len;
  }
  const std::size_t rid = t.node_count();
  return t.emit_if(rg, ys, std::move(y), [xs, axis, sp, rid](Tape<T>& t) {
    const auto& gy = t.grad_buffer(rid);
    std::size_t off = 0;
    for (const auto& x : xs) {
      const std::size_t len = t.node(x).shape[axis];
      if (t.needs_grad(x)) {
        auto& gx = t.grad_buffer(x.id());
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < len * sp.inner; ++j)
            gx[o * len * sp.inner + j] += gy[(o * sp.len + off) * sp.inner + j];
      }
      off += len;
    }
  });
}

/// Slice [start, start+len) along `axis`.
template <class T>
Var<T> narrow(Var<T> x, std::size_t axis, std::size_t start, std::size_t len) {
  auto& t = x.tape();
  const auto sp = detail::split_axis(x.shape(), axis);
  if (start + len > sp.len) fail_usage("narrow out of range");
  Shape ys = x.shape();
  ys[axis] = len;
  const auto& xv = x.value();
  std::vector<T> y(sp.outer * len * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner), len * sp.inner,
                y.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner));
  const std::size_t rid = t.node_count();
  return t.emit(ys, std::move(y), {x}, [x, sp, start, len, rid](Tape<T>& t) {
    const auto& gy = t.grad_buffer(rid);
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < len * sp.inner; ++j) gx[(o * sp.len + start) * sp.inner + j] += gy[o * len * sp.inner + j];
  });
}

/// Rows of x (axis 0) picked by `indices`, in that order.
template <class T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> indices) {
  auto& t = x.tape();
  const std::size_t rows = x.dim(0);
  const std::size_t inner = x.size() / rows;
  Shape ys = x.shape();
  ys[0] = indices.size();
  const auto& xv = x.value();
  std::vector<T> y(indices.size() * inner);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) fail_usage("gather index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(indices[i] * inner), inner,
                y.begin() + static_cast<std::ptrdiff_t>(i * inner));
  }
  const std::size_t rid = t.node_count();
  return t.emit(ys, std::move(y), {x}, [x, inner, indices = std::move(indices), rid](Tape<T>& t) {
    const auto& gy = t.grad_buffer(rid);
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < inner; ++j) gx[indices[i] * inner + j] += gy[i * inner + j];
  });
}

// ---------------------------------------------------------------- losses & regularizers

/// Symmetric L2 Chamfer distance per batch element, averaged over the batch.
/// pred [B, P, 3], gt [B, Q, 3]. Nearest-neighbor ties resolve to the lower index.
template <class T>
Var<T> chamfer_l2(Var<T> pred, Var<T> gt) {
  auto& t = pred.tape();
  const Shape& ps = pred.shape();
  const Shape& gs = gt.shape();
  if (ps.size() != 3 || gs.size() != 3 || ps[2] != 3 || gs[2] != 3 || ps[0] != gs[0])
    fail_usage("chamfer expects [B,P,3] and [B,Q,3] with equal B");
  const std::size_t B = ps[0], P = ps[1], Q = gs[1];
  if (B == 0 || P == 0 || Q == 0) fail_data("empty point set");
  const auto& pv = pred.value();
  const auto& gv = gt.value();
  std::vector<std::size_t> nn_pred(B * P), nn_gt(B * Q);
  auto d2 = [](const T* a, const T* b) {
    const T dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
  };
  T total = 0;
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* pb = pv.data() + bi * P * 3;
    const T* gb = gv.data() + bi * Q * 3;
    std::vector<T> best_g(Q, std::numeric_limits<T>::infinity());
    std::vector<std::size_t> arg_g(Q, 0);
    T sum_p = 0;
    for (std::size_t i = 0; i < P; ++i) {
      T best = std::numeric_limits<T>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < Q; ++j) {
        const T d = d2(pb + 3 * i, gb + 3 * j);
        if (d < best) {
          best = d;
          arg = j;
        }
        if (d < best_g[j]) {
          best_g[j] = d;
          arg_g[j] = i;
        }
      }
      sum_p += best;
      nn_pred[bi * P + i] = arg;
    }
    T sum_g = 0;
    for (std::size_t j = 0; j < Q; ++j) {
      sum_g += best_g[j];
      nn_gt[bi * Q + j] = arg_g[j];
    }
    total += sum_p / T(P) + sum_g / T(Q);
  }
  total /= T(B);
  const std::size_t rid = t.node_count();
  return t.emit({1}, {total}, {pred, gt},
                [pred, gt, B, P, Q, nn_pred = std::move(nn_pred), nn_gt = std::move(nn_gt), rid](Tape<T>& t) {
                  const T g = t.grad_buffer(rid)[0] / T(B);
                  const auto& pv = t.value(pred);
                  const auto& gv = t.value(gt);
                  const bool gp = t.needs_grad(pred), gg = t.needs_grad(gt);
                  std::vector<T>* gpred = gp ? &t.grad_buffer(pred.id()) : nullptr;
                  std::vector<T>* ggt = gg ? &t.grad_buffer(gt.id()) : nullptr;
                  for (std::size_t bi = 0; bi < B; ++bi) {
                    for (std::size_t i = 0; i < P; ++i) {
                      const std::size_t pi = bi * P + i, gj = bi * Q + nn_pred[pi];
                      for (int c = 0; c < 3; ++c) {
                        const T d = T(2) * (pv[3 * pi + c] - gv[3 * gj + c]) * g / T(P);
                        if (gp) (*gpred)[3 * pi + c] += d;
                        if (gg) (*ggt)[3 * gj + c] -= d;
                      }
                    }
                    for (std::size_t j = 0; j < Q; ++j) {
                      const std::size_t gj = bi * Q + j, pi = bi * P + nn_gt[gj];
                      for (int c = 0; c < 3; ++c) {
                        const T d = T(2) * (pv[3 * pi + c] - gv[3 * gj + c]) * g / T(Q);
                        if (gp) (*gpred)[3 * pi + c] += d;
                        if (gg) (*ggt)[3 * gj + c] -= d;
                      }
                    }
                  }
                });
}

/// Mean cross-entropy of logits [B, C] against integer labels, with optional label smoothing.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::size_t>& labels, T smoothing = T(0)) {
  auto& t = logits.tape();
  if (logits.shape().size() != 2) fail_usage("cross_entropy expects [B, C] logits");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B) fail_usage("label count does not match batch");
  const auto& lv = logits.value();
  std::vector<T> prob(B * C), target(B * C, smoothing / T(C));
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= C) fail_data("label " + std::to_string(labels[b]) + " outside " + std::to_string(C) + " classes");
    target[b * C + labels[b]] += T(1) - smoothing;
    const T* row = lv.data() + b * C;
    const T mx = *std::max_element(row, row + C);
    T s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(row[c] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) {
      prob[b * C + c] = std::exp(row[c] - lse);
      loss -= target[b * C + c] * (row[c] - lse);
    }
  }
  loss /= T(B);
  const std::size_t rid = t.node_count();
  return t.emit({1}, {loss}, {logits}, [logits, B, prob = std::move(prob), target = std::move(target), rid](Tape<T>& t) {
    const T g = t.grad_buffer(rid)[0] / T(B);
    auto& gl = t.grad_buffer(logits.id());
    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g * (prob[i] - target[i]);
  });
}

/// Inverted dropout with a deterministic mask drawn from `seed`.
template <class T>
Var<T> dropout(Var<T> x, T p, std::uint64_t seed) {
  if (p <= T(0)) return x;
  if (p >= T(1)) fail_usage("dropout probability must be below 1");
  Rng rng(seed);
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  std::vector<T> m(x.size());
  const T s = T(1) / (T(1) - p);
  for (auto& v : m) v = keep(rng) ? s : T(0);
  return mul(x, x.tape().constant(x.shape(), std::move(m)));
}

}  // namespace ops
}  // namespace geomae
