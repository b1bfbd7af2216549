#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "composer/errors.hpp"
#include "composer/gemm.hpp"
#include "composer/rng.hpp"

namespace composer {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& finite_check_flag() {
  thread_local bool enabled = false;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }
inline bool finite_checks_enabled() { return detail::finite_check_flag(); }
inline void set_finite_checks(bool on) { detail::finite_check_flag() = on; }

// Scoped disable of graph recording (inference / data paths).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;
  std::vector<T> grad;  // allocated lazily during backward
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  const char* op = "leaf";

  int64_t numel() const { return static_cast<int64_t>(data->size()); }

  void accumulate_grad(const T* src, int64_t n) {
    if (grad.empty()) grad.assign(data->size(), T(0));
    T* g = grad.data();
    for (int64_t i = 0; i < n; ++i) g[i] += src[i];
  }

  T* ensure_grad() {
    if (grad.empty()) grad.assign(data->size(), T(0));
    return grad.data();
  }
};

// Dense row-major tensor with reverse-mode autodiff. Value semantics over a
// shared node; data buffers are written once by the producing op and treated
// as immutable afterwards (leaf tensors may be mutated between graphs).
template <typename T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;

  static TensorT from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("from: " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static TensorT full(Shape shape, T value) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)), value);
    return from(std::move(shape), std::move(v));
  }

  static TensorT zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static TensorT ones(Shape shape) { return full(std::move(shape), T(1)); }

  static TensorT scalar(T value) { return from({1}, {value}); }

  static TensorT randn(Shape shape, Rng& rng) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return from(std::move(shape), std::move(v));
  }

  static TensorT uniform(Shape shape, Rng& rng, T lo = T(0), T hi = T(1)) {
    std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = lo + static_cast<T>(rng.uniform()) * (hi - lo);
    return from(std::move(shape), std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }
  int64_t numel() const { return node_->numel(); }

  std::vector<T>& data() { return *node_->data; }
  const std::vector<T>& data() const { return *node_->data; }
  T* ptr() { return node_->data->data(); }
  const T* ptr() const { return node_->data->data(); }

  T item() const {
    if (numel() != 1)
      throw ContractError("item: tensor has " + std::to_string(numel()) +
                          " elements");
    return (*node_->data)[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }

  // Same data, detached from the recorded graph.
  TensorT detach() const {
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    return t;
  }

  TensorT clone() const {
    return TensorT::from(node_->shape, *node_->data);
  }

  // Reverse-mode sweep from a scalar. Accumulates into the .grad of every
  // requires_grad leaf reachable from this node; interior grads are freed
  // as soon as they have been propagated.
  void backward() const {
    if (numel() != 1) throw ContractError("backward: loss must be scalar");
    if (!node_->requires_grad)
      throw ContractError("backward: loss does not require grad");

    // Post-order over the requires_grad subgraph.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        TensorNode<T>* p = n->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->grad.assign(1, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (!n->backward_fn) continue;  // leaf
      if (n->grad.empty()) n->grad.assign(n->data->size(), T(0));
      n->backward_fn(*n);
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }

  std::shared_ptr<TensorNode<T>>& node() { return node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  static TensorT wrap(std::shared_ptr<TensorNode<T>> n) {
    TensorT t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

template <typename T>
void check_finite(const TensorNode<T>& n) {
  for (T v : *n.data)
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite value produced by op '") +
                         n.op + "'");
}

// Allocates the result node and wires parents/backward under the current
// grad mode.
template <typename T, typename... Parents>
TensorT<T> make_op(const char* op, Shape shape,
                   std::function<void(TensorNode<T>&)> backward_fn,
                   const Parents&... parents) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->data =
      std::make_shared<std::vector<T>>(static_cast<size_t>(shape_numel(n->shape)));
  n->op = op;
  bool track = grad_mode_flag() && (... || parents.requires_grad());
  if (track) {
    n->requires_grad = true;
    (n->parents.push_back(parents.node()), ...);
    n->backward_fn = std::move(backward_fn);
  }
  return TensorT<T>::wrap(std::move(n));
}

template <typename T>
void require_same_shape(const char* op, const TensorT<T>& a,
                        const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("add", a, b);
  auto out = detail::make_op<T>(
      "add", a.shape(),
      [](TensorNode<T>& self) {
        const T* g = self.grad.data();
        self.parents[0]->accumulate_grad(g, self.numel());
        self.parents[1]->accumulate_grad(g, self.numel());
      },
      a, b);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  if (finite_checks_enabled()) detail::check_finite(*out.node());
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("sub", a, b);
  auto out = detail::make_op<T>(
      "sub", a.shape(),
      [](TensorNode<T>& self) {
        const T* g = self.grad.data();
        self.parents[0]->accumulate_grad(g, self.numel());
        T* gb = self.parents[1]->ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) gb[i] -= g[i];
      },
      a, b);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  if (finite_checks_enabled()) detail::check_finite(*out.node());
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("mul", a, b);
  auto out = detail::make_op<T>(
      "mul", a.shape(),
      [](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* pa = self.parents[0]->data->data();
        const T* pb = self.parents[1]->data->data();
        T* ga = self.parents[0]->ensure_grad();
        T* gb = self.parents[1]->ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) {
          ga[i] += g[i] * pb[i];
          gb[i] += g[i] * pa[i];
        }
      },
      a, b);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  if (finite_checks_enabled()) detail::check_finite(*out.node());
  return out;
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
  auto out = detail::make_op<T>(
      "mul_scalar", a.shape(),
      [s](TensorNode<T>& self) {
        const T* g = self.grad.data();
        T* ga = self.parents[0]->ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) ga[i] += g[i] * s;
      },
      a);
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
  if (finite_checks_enabled()) detail::check_finite(*out.node());
  return out;
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
  auto out = detail::make_op<T>(
      "add_scalar", a.shape(),
      [](TensorNode<T>& self) {
        self.parents[0]->accumulate_grad(self.grad.data(), self.numel());
      },
      a);
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + s;
  return out;
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
TensorT<T> silu(const TensorT<T>& a) {
  auto out = detail::make_op<T>(
      "silu", a.shape(),
      [](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* x = self.parents[0]->data->data();
        T* ga = self.parents[0]->ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i) {
          T s = T(1) / (T(1) + std::exp(-x[i]));
          ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
        }
      },
      a);
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i)
    po[i] = pa[i] / (T(1) + std::exp(-pa[i]));
  if (finite_checks_enabled()) detail::check_finite(*out.node());
  return out;
}

// Subgradient convention: zero outside [lo, hi].
template <typename T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi) {
  auto out = detail::make_op<T>(
      "clamp", a.shape(),
      [lo, hi](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* x = self.parents[0]->data->data();
        T* ga = self.parents[0]->ensure_grad();
        for (int64_t i = 0; i < self.numel(); ++i)
          if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
      },
      a);
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i)
    po[i] = std::min(hi, std::max(lo, pa[i]));
  return out;
}

template <typename T>
TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) {
  return add(a, b);
}
template <typename T>
TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) {
  return sub(a, b);
}
template <typename T>
TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) {
  return mul(a, b);
}
template <typename T>
TensorT<T> operator*(const TensorT<T>& a, T s) {
  return mul_scalar(a, s);
}
template <typename T>
TensorT<T> operator*(T s, const TensorT<T>& a) {
  return mul_scalar(a, s);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
  auto out = detail::make_op<T>(
      "sum", {1},
      [](TensorNode<T>& self) {
        T g = self.grad[0];
        T* ga = self.parents[0]->ensure_grad();
        int64_t n = self.parents[0]->numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += g;
      },
      a);
  double acc = 0.0;
  const T* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(pa[i]);
  out.ptr()[0] = static_cast<T>(acc);
  return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
  int64_t n = a.numel();
  auto out = detail::make_op<T>(
      "mean", {1},
      [n](TensorNode<T>& self) {
        T g = self.grad[0] / static_cast<T>(n);
        T* ga = self.parents[0]->ensure_grad();
        for (int64_t i = 0; i < n; ++i) ga[i] += g;
      },
      a);
  double acc = 0.0;
  const T* pa = a.ptr();
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(pa[i]);
  out.ptr()[0] = static_cast<T>(acc / static_cast<double>(n));
  return out;
}

// Mean over the trailing axis: [..., L] -> [...].
template <typename T>
TensorT<T> mean_last(const TensorT<T>& a) {
  if (a.rank() < 2) throw ShapeError("mean_last: rank must be >= 2");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  int64_t l = a.shape().back();
  int64_t rows = shape_numel(out_shape);
  auto out = detail::make_op<T>(
      "mean_last", std::move(out_shape),
      [l, rows](TensorNode<T>& self) {
        const T* g = self.grad.data();
        T* ga = self.parents[0]->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          T gv = g[r] / static_cast<T>(l);
          T* row = ga + r * l;
          for (int64_t j = 0; j < l; ++j) row[j] += gv;
        }
      },
      a);
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const T* row = pa + r * l;
    for (int64_t j = 0; j < l; ++j) acc += static_cast<double>(row[j]);
    po[r] = static_cast<T>(acc / static_cast<double>(l));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops (explicit; elementwise ops never broadcast)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->data = a.node()->data;  // shared buffer; buffers are write-once
  n->op = "reshape";
  if (grad_enabled() && a.requires_grad()) {
    n->requires_grad = true;
    n->parents.push_back(a.node());
    n->backward_fn = [](TensorNode<T>& self) {
      self.parents[0]->accumulate_grad(self.grad.data(), self.numel());
    };
  }
  return TensorT<T>::wrap(std::move(n));
}

// Repeats a size-1 axis `times` times.
template <typename T>
TensorT<T> expand(const TensorT<T>& a, size_t axis, int64_t times) {
  if (axis >= a.rank() || a.shape()[axis] != 1)
    throw ShapeError("expand: axis " + std::to_string(axis) +
                     " of " + shape_str(a.shape()) + " is not 1");
  Shape out_shape = a.shape();
  out_shape[axis] = times;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  auto out = detail::make_op<T>(
      "expand", std::move(out_shape),
      [outer, inner, times](TensorNode<T>& self) {
        const T* g = self.grad.data();
        T* ga = self.parents[0]->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t t = 0; t < times; ++t) {
            const T* src = g + (o * times + t) * inner;
            T* dst = ga + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
      },
      a);
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t t = 0; t < times; ++t)
      std::memcpy(po + (o * times + t) * inner, pa + o * inner,
                  sizeof(T) * static_cast<size_t>(inner));
  return out;
}

template <typename T>
TensorT<T> transpose_axes(const TensorT<T>& a, size_t ax0, size_t ax1) {
  if (ax0 >= a.rank() || ax1 >= a.rank())
    throw ShapeError("transpose_axes: axis out of range");
  if (ax0 == ax1) return reshape(a, a.shape());
  if (ax0 > ax1) std::swap(ax0, ax1);
  Shape out_shape = a.shape();
  std::swap(out_shape[ax0], out_shape[ax1]);

  const Shape in_shape = a.shape();
  auto copy_transposed = [in_shape, ax0, ax1](const T* src, T* dst) {
    size_t r = in_shape.size();
    std::vector<int64_t> in_strides(r, 1);
    for (size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    Shape oshape = in_shape;
    std::swap(oshape[ax0], oshape[ax1]);
    std::vector<int64_t> perm_strides(r);
    for (size_t i = 0; i < r; ++i) perm_strides[i] = in_strides[i];
    std::swap(perm_strides[ax0], perm_strides[ax1]);
    int64_t n = shape_numel(in_shape);
    std::vector<int64_t> idx(r, 0);
    int64_t src_off = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
      dst[flat] = src[src_off];
      for (size_t i = r; i-- > 0;) {
        ++idx[i];
        src_off += perm_strides[i];
        if (idx[i] < oshape[i]) break;
        src_off -= perm_strides[i] * oshape[i];
        idx[i] = 0;
      }
    }
  };

  auto out = detail::make_op<T>(
      "transpose", std::move(out_shape),
      [in_shape, ax0, ax1](TensorNode<T>& self) {
        // Gradient of a permutation is the inverse permutation.
        Shape gshape = self.shape;
        size_t r = gshape.size();
        std::vector<int64_t> g_strides(r, 1);
        for (size_t i = r; i-- > 1;) g_strides[i - 1] = g_strides[i] * gshape[i];
        std::vector<int64_t> perm_strides(r);
        for (size_t i = 0; i < r; ++i) perm_strides[i] = g_strides[i];
        std::swap(perm_strides[ax0], perm_strides[ax1]);
        const T* g = self.grad.data();
        T* ga = self.parents[0]->ensure_grad();
        int64_t n = self.numel();
        std::vector<int64_t> idx(r, 0);
        int64_t g_off = 0;
        for (int64_t flat = 0; flat < n; ++flat) {
          ga[flat] += g[g_off];
          for (size_t i = r; i-- > 0;) {
            ++idx[i];
            g_off += perm_strides[i];
            if (idx[i] < in_shape[i]) break;
            g_off -= perm_strides[i] * in_shape[i];
            idx[i] = 0;
          }
        }
      },
      a);
  copy_transposed(a.ptr(), out.ptr());
  return out;
}

template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& a) {
  return transpose_axes(a, a.rank() - 2, a.rank() - 1);
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, size_t axis, int64_t start, int64_t len) {
  if (axis >= a.rank() || start < 0 || len <= 0 ||
      start + len > a.shape()[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  int64_t in_axis = a.shape()[axis];
  auto out = detail::make_op<T>(
      "slice", std::move(out_shape),
      [outer, inner, in_axis, start, len](TensorNode<T>& self) {
        const T* g = self.grad.data();
        T* ga = self.parents[0]->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < len; ++j) {
            const T* src = g + (o * len + j) * inner;
            T* dst = ga + (o * in_axis + start + j) * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
      },
      a);
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < len; ++j)
      std::memcpy(po + (o * len + j) * inner,
                  pa + (o * in_axis + start + j) * inner,
                  sizeof(T) * static_cast<size_t>(inner));
  return out;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size())
      throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.shape()[i] != ref[i])
        throw ShapeError("concat: shape mismatch at axis " + std::to_string(i));
    axis_total += p.shape()[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = axis_total;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<int64_t> part_axis(parts.size());
  for (size_t i = 0; i < parts.size(); ++i) part_axis[i] = parts[i].shape()[axis];

  auto n = std::make_shared<TensorNode<T>>();
  n->shape = out_shape;
  n->data = std::make_shared<std::vector<T>>(
      static_cast<size_t>(shape_numel(out_shape)));
  n->op = "concat";
  bool track = grad_enabled();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (track && any) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    n->backward_fn = [outer, inner, axis_total, part_axis](TensorNode<T>& self) {
      const T* g = self.grad.data();
      int64_t offset = 0;
      for (size_t pi = 0; pi < self.parents.size(); ++pi) {
        int64_t pa = part_axis[pi];
        T* gp = self.parents[pi]->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < pa; ++j) {
            const T* src = g + (o * axis_total + offset + j) * inner;
            T* dst = gp + (o * pa + j) * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
        offset += pa;
      }
    };
  }
  T* po = n->data->data();
  int64_t offset = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    int64_t pa = part_axis[pi];
    const T* src = parts[pi].ptr();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < pa; ++j)
        std::memcpy(po + (o * axis_total + offset + j) * inner,
                    src + (o * pa + j) * inner,
                    sizeof(T) * static_cast<size_t>(inner));
    offset += pa;
  }
  return TensorT<T>::wrap(std::move(n));
}

// Stacks same-shape tensors along a new leading axis.
template <typename T>
TensorT<T> stack(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ContractError("stack: no inputs");
  std::vector<TensorT<T>> views;
  views.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    views.push_back(reshape(p, s));
  }
  return concat(views, 0);
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> gather_rows(const TensorT<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-D");
  int64_t v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ContractError("gather_rows: id " + std::to_string(id) +
                          " out of table rows " + std::to_string(v));
  auto ids_copy = ids;
  auto out = detail::make_op<T>(
      "gather_rows", {static_cast<int64_t>(ids.size()), d},
      [ids_copy, d](TensorNode<T>& self) {
        const T* g = self.grad.data();
        T* gt = self.parents[0]->ensure_grad();
        for (size_t r = 0; r < ids_copy.size(); ++r) {
          T* dst = gt + static_cast<int64_t>(ids_copy[r]) * d;
          const T* src = g + static_cast<int64_t>(r) * d;
          for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
        }
      },
      table);
  const T* pt = table.ptr();
  T* po = out.ptr();
  for (size_t r = 0; r < ids.size(); ++r)
    std::memcpy(po + static_cast<int64_t>(r) * d,
                pt + static_cast<int64_t>(ids[r]) * d,
                sizeof(T) * static_cast<size_t>(d));
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects 2-D operands");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::make_op<T>(
      "matmul", {m, n},
      [m, k, n](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* pa = self.parents[0]->data->data();
        const T* pb = self.parents[1]->data->data();
        // dA = G * B^T ; dB = A^T * G
        detail::gemm(false, true, m, k, n, T(1), g, n, pb, n, T(1),
                     self.parents[0]->ensure_grad(), k);
        detail::gemm(true, false, k, n, m, T(1), pa, k, g, n, T(1),
                     self.parents[1]->ensure_grad(), n);
      },
      a, b);
  detail::gemm(false, false, m, n, k, T(1), a.ptr(), k, b.ptr(), n, T(0),
               out.ptr(), n);
  if (finite_checks_enabled()) detail::check_finite(*out.node());
  return out;
}

// Batched matmul: [N, m, k] x [N, k, n] -> [N, m, n].
template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw ShapeError("bmm: expects 3-D operands");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: shape mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  auto out = detail::make_op<T>(
      "bmm", {nb, m, n},
      [nb, m, k, n](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* pa = self.parents[0]->data->data();
        const T* pb = self.parents[1]->data->data();
        T* ga = self.parents[0]->ensure_grad();
        T* gb = self.parents[1]->ensure_grad();
        for (int64_t s = 0; s < nb; ++s) {
          detail::gemm(false, true, m, k, n, T(1), g + s * m * n, n,
                       pb + s * k * n, n, T(1), ga + s * m * k, k);
          detail::gemm(true, false, k, n, m, T(1), pa + s * m * k, k,
                       g + s * m * n, n, T(1), gb + s * k * n, n);
        }
      },
      a, b);
  for (int64_t s = 0; s < nb; ++s)
    detail::gemm(false, false, m, n, k, T(1), a.ptr() + s * m * k, k,
                 b.ptr() + s * k * n, n, T(0), out.ptr() + s * m * n, n);
  if (finite_checks_enabled()) detail::check_finite(*out.node());
  return out;
}

// x[N, D] + row vector b[D].
template <typename T>
TensorT<T> add_rowvec(const TensorT<T>& x, const TensorT<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
    throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " + " +
                     shape_str(b.shape()));
  int64_t n = x.dim(0), d = x.dim(1);
  auto out = detail::make_op<T>(
      "add_rowvec", x.shape(),
      [n, d](TensorNode<T>& self) {
        const T* g = self.grad.data();
        self.parents[0]->accumulate_grad(g, self.numel());
        T* gb = self.parents[1]->ensure_grad();
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      },
      x, b);
  const T* px = x.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (int64_t r = 0; r < n; ++r)
    for (int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
  return out;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation): x[B,C,H,W], w[O,C,k,k] -> [B,O,H',W']
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t k,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* cols) {
  // cols layout: [ho*wo rows, c*k*k cols]
  int64_t row_len = c * k * k;
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      T* row = cols + (oy * wo + ox) * row_len;
      int64_t iy0 = oy * stride - pad;
      int64_t ix0 = ox * stride - pad;
      for (int64_t ci = 0; ci < c; ++ci) {
        const T* plane = x + ci * h * w;
        for (int64_t ky = 0; ky < k; ++ky) {
          int64_t iy = iy0 + ky;
          T* dst = row + (ci * k + ky) * k;
          if (iy < 0 || iy >= h) {
            for (int64_t kx = 0; kx < k; ++kx) dst[kx] = T(0);
            continue;
          }
          for (int64_t kx = 0; kx < k; ++kx) {
            int64_t ix = ix0 + kx;
            dst[kx] = (ix >= 0 && ix < w) ? plane[iy * w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* cols, int64_t c, int64_t h, int64_t w, int64_t k,
                  int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* x) {
  int64_t row_len = c * k * k;
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      const T* row = cols + (oy * wo + ox) * row_len;
      int64_t iy0 = oy * stride - pad;
      int64_t ix0 = ox * stride - pad;
      for (int64_t ci = 0; ci < c; ++ci) {
        T* plane = x + ci * h * w;
        for (int64_t ky = 0; ky < k; ++ky) {
          int64_t iy = iy0 + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + (ci * k + ky) * k;
          for (int64_t kx = 0; kx < k; ++kx) {
            int64_t ix = ix0 + kx;
            if (ix >= 0 && ix < w) plane[iy * w + ix] += src[kx];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                  int64_t stride = 1, int64_t pad = -1) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: x must be [B,C,H,W], w must be [O,C,k,k]");
  int64_t bs = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != k)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) +
                     " incompatible with input " + shape_str(x.shape()));
  if (pad < 0) pad = k / 2;  // "same" for odd k, stride 1
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  int64_t ho = (h + 2 * pad - k) / stride + 1;
  int64_t wo = (wd + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0)
    throw ShapeError("conv2d: non-positive output extent");
  bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != o))
    throw ShapeError("conv2d: bias must be [O]");

  int64_t row_len = c * k * k;
  auto backward = [bs, c, h, wd, o, k, stride, pad, ho, wo, row_len,
                   has_bias](TensorNode<T>& self) {
    const T* g = self.grad.data();  // [B,O,ho,wo]
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    const T* px = xn.data->data();
    const T* pw = wn.data->data();
    T* gx = xn.requires_grad ? xn.ensure_grad() : nullptr;
    T* gw = wn.requires_grad ? wn.ensure_grad() : nullptr;
    T* gb = nullptr;
    if (has_bias) {
      auto& bn = *self.parents[2];
      if (bn.requires_grad) gb = bn.ensure_grad();
    }
    std::vector<T> cols(static_cast<size_t>(ho * wo * row_len));
    std::vector<T> gcols(static_cast<size_t>(ho * wo * row_len));
    for (int64_t bi = 0; bi < bs; ++bi) {
      const T* gb_out = g + bi * o * ho * wo;
      if (gw) {
        detail::im2col(px + bi * c * h * wd, c, h, wd, k, stride, pad, ho, wo,
                       cols.data());
        // dW[O, row_len] += G_b[O, ho*wo] * cols[ho*wo, row_len]
        detail::gemm(false, false, o, row_len, ho * wo, T(1), gb_out, ho * wo,
                     cols.data(), row_len, T(1), gw, row_len);
      }
      if (gx) {
        // dcols[ho*wo, row_len] = G_b^T[ho*wo, O] * W[O, row_len]
        detail::gemm(true, false, ho * wo, row_len, o, T(1), gb_out, ho * wo,
                     pw, row_len, T(0), gcols.data(), row_len);
        detail::col2im_accum(gcols.data(), c, h, wd, k, stride, pad, ho, wo,
                             gx + bi * c * h * wd);
      }
      if (gb) {
        for (int64_t oc = 0; oc < o; ++oc) {
          const T* plane = gb_out + oc * ho * wo;
          T acc = T(0);
          for (int64_t i = 0; i < ho * wo; ++i) acc += plane[i];
          gb[oc] += acc;
        }
      }
    }
  };

  TensorT<T> out =
      has_bias
          ? detail::make_op<T>("conv2d", Shape{bs, o, ho, wo}, backward, x, w, b)
          : detail::make_op<T>("conv2d", Shape{bs, o, ho, wo}, backward, x, w);

  std::vector<T> cols(static_cast<size_t>(ho * wo * row_len));
  const T* px = x.ptr();
  const T* pw = w.ptr();
  const T* pb = has_bias ? b.ptr() : nullptr;
  T* po = out.ptr();
  for (int64_t bi = 0; bi < bs; ++bi) {
    detail::im2col(px + bi * c * h * wd, c, h, wd, k, stride, pad, ho, wo,
                   cols.data());
    // out_b[O, ho*wo] = W[O, row_len] * cols^T
    detail::gemm(false, true, o, ho * wo, row_len, T(1), pw, row_len,
                 cols.data(), row_len, T(0), po + bi * o * ho * wo, ho * wo);
    if (pb) {
      for (int64_t oc = 0; oc < o; ++oc) {
        T* plane = po + (bi * o + oc) * ho * wo;
        for (int64_t i = 0; i < ho * wo; ++i) plane[i] += pb[oc];
      }
    }
  }
  if (finite_checks_enabled()) detail::check_finite(*out.node());
  return out;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, int64_t stride = 1,
                  int64_t pad = -1) {
  return conv2d(x, w, TensorT<T>(), stride, pad);
}

// ---------------------------------------------------------------------------
// Normalization / modulation
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, int64_t groups,
                      const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5)) {
  if (x.rank() != 4) throw ShapeError("group_norm: x must be [B,C,H,W]");
  int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c % groups != 0)
    throw ContractError("group_norm: channels " + std::to_string(c) +
                        " not divisible by groups " + std::to_string(groups));
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("group_norm: gamma/beta must be [C]");
  int64_t cg = c / groups;
  int64_t gsize = cg * hw;

  // Stats are recomputed in backward from the saved input.
  auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(b * groups * 2));
  auto out = detail::make_op<T>(
      "group_norm", x.shape(),
      [b, c, hw, groups, cg, gsize, stats](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* px = self.parents[0]->data->data();
        const T* pgamma = self.parents[1]->data->data();
        auto& xn = *self.parents[0];
        T* gx = xn.requires_grad ? xn.ensure_grad() : nullptr;
        T* ggamma = self.parents[1]->requires_grad
                        ? self.parents[1]->ensure_grad()
                        : nullptr;
        T* gbeta = self.parents[2]->requires_grad
                       ? self.parents[2]->ensure_grad()
                       : nullptr;
        for (int64_t bi = 0; bi < b; ++bi) {
          for (int64_t gi = 0; gi < groups; ++gi) {
            T mu = (*stats)[(bi * groups + gi) * 2];
            T inv_std = (*stats)[(bi * groups + gi) * 2 + 1];
            const T* xg = px + (bi * c + gi * cg) * hw;
            const T* gg = g + (bi * c + gi * cg) * hw;
            // Accumulate sums for the dx formula.
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int64_t ci = 0; ci < cg; ++ci) {
              T gam = pgamma[gi * cg + ci];
              const T* xrow = xg + ci * hw;
              const T* grow = gg + ci * hw;
              for (int64_t i = 0; i < hw; ++i) {
                T xhat = (xrow[i] - mu) * inv_std;
                T dxhat = grow[i] * gam;
                sum_dxhat += static_cast<double>(dxhat);
                sum_dxhat_xhat += static_cast<double>(dxhat * xhat);
              }
            }
            if (ggamma || gbeta) {
              for (int64_t ci = 0; ci < cg; ++ci) {
                const T* xrow = xg + ci * hw;
                const T* grow = gg + ci * hw;
                double dgam = 0.0, dbet = 0.0;
                for (int64_t i = 0; i < hw; ++i) {
                  dgam += static_cast<double>(grow[i] * (xrow[i] - mu) * inv_std);
                  dbet += static_cast<double>(grow[i]);
                }
                if (ggamma) ggamma[gi * cg + ci] += static_cast<T>(dgam);
                if (gbeta) gbeta[gi * cg + ci] += static_cast<T>(dbet);
              }
            }
            if (gx) {
              T m_dxhat = static_cast<T>(sum_dxhat / static_cast<double>(gsize));
              T m_dxhat_xhat =
                  static_cast<T>(sum_dxhat_xhat / static_cast<double>(gsize));
              T* gxg = gx + (bi * c + gi * cg) * hw;
              for (int64_t ci = 0; ci < cg; ++ci) {
                T gam = pgamma[gi * cg + ci];
                const T* xrow = xg + ci * hw;
                const T* grow = gg + ci * hw;
                T* gxrow = gxg + ci * hw;
                for (int64_t i = 0; i < hw; ++i) {
                  T xhat = (xrow[i] - mu) * inv_std;
                  T dxhat = grow[i] * gam;
                  gxrow[i] +=
                      inv_std * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                }
              }
            }
          }
        }
      },
      x, gamma, beta);

  const T* px = x.ptr();
  const T* pgamma = gamma.ptr();
  const T* pbeta = beta.ptr();
  T* po = out.ptr();
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t gi = 0; gi < groups; ++gi) {
      const T* xg = px + (bi * c + gi * cg) * hw;
      double s = 0.0, s2 = 0.0;
      for (int64_t i = 0; i < gsize; ++i) {
        double v = static_cast<double>(xg[i]);
        s += v;
        s2 += v * v;
      }
      double mu = s / static_cast<double>(gsize);
      double var = s2 / static_cast<double>(gsize) - mu * mu;
      if (var < 0) var = 0;
      T inv_std = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      (*stats)[(bi * groups + gi) * 2] = static_cast<T>(mu);
      (*stats)[(bi * groups + gi) * 2 + 1] = inv_std;
      T* og = po + (bi * c + gi * cg) * hw;
      for (int64_t ci = 0; ci < cg; ++ci) {
        T gam = pgamma[gi * cg + ci];
        T bet = pbeta[gi * cg + ci];
        const T* xrow = xg + ci * hw;
        T* orow = og + ci * hw;
        for (int64_t i = 0; i < hw; ++i)
          orow[i] = (xrow[i] - static_cast<T>(mu)) * inv_std * gam + bet;
      }
    }
  }
  if (finite_checks_enabled()) detail::check_finite(*out.node());
  return out;
}

// Per-channel affine modulation: y = x * (1 + scale) + shift,
// x[B,C,H,W], scale/shift[B,C].
template <typename T>
TensorT<T> film(const TensorT<T>& x, const TensorT<T>& scale,
                const TensorT<T>& shift) {
  if (x.rank() != 4 || scale.rank() != 2 || shift.rank() != 2)
    throw ShapeError("film: x must be 4-D, scale/shift 2-D");
  int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (scale.dim(0) != b || scale.dim(1) != c || shift.shape() != scale.shape())
    throw ShapeError("film: scale/shift must be [B,C]");
  auto out = detail::make_op<T>(
      "film", x.shape(),
      [b, c, hw](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* px = self.parents[0]->data->data();
        const T* psc = self.parents[1]->data->data();
        auto& xn = *self.parents[0];
        T* gx = xn.requires_grad ? xn.ensure_grad() : nullptr;
        T* gsc = self.parents[1]->requires_grad ? self.parents[1]->ensure_grad()
                                                : nullptr;
        T* gsh = self.parents[2]->requires_grad ? self.parents[2]->ensure_grad()
                                                : nullptr;
        for (int64_t bi = 0; bi < b; ++bi)
          for (int64_t ci = 0; ci < c; ++ci) {
            int64_t base = (bi * c + ci) * hw;
            T sc = psc[bi * c + ci];
            double dsc = 0.0, dsh = 0.0;
            for (int64_t i = 0; i < hw; ++i) {
              T gv = g[base + i];
              if (gx) gx[base + i] += gv * (T(1) + sc);
              dsc += static_cast<double>(gv * px[base + i]);
              dsh += static_cast<double>(gv);
            }
            if (gsc) gsc[bi * c + ci] += static_cast<T>(dsc);
            if (gsh) gsh[bi * c + ci] += static_cast<T>(dsh);
          }
      },
      x, scale, shift);
  const T* px = x.ptr();
  const T* psc = scale.ptr();
  const T* psh = shift.ptr();
  T* po = out.ptr();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      int64_t base = (bi * c + ci) * hw;
      T sc = T(1) + psc[bi * c + ci];
      T sh = psh[bi * c + ci];
      for (int64_t i = 0; i < hw; ++i) po[base + i] = px[base + i] * sc + sh;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / attention
// ---------------------------------------------------------------------------

// Key-mask addressing for a score tensor viewed as rows of length Lk.
struct AttnMask {
  enum class Kind { kNone, kQK, kBK };
  Kind kind = Kind::kNone;
  std::vector<uint8_t> bits;  // 1 = attend
  int64_t lq = 0, lk = 0, batch = 0, heads = 1;

  static AttnMask none() { return {}; }
  // mask[Lq x Lk], shared across batch and heads
  static AttnMask qk(std::vector<uint8_t> m, int64_t lq, int64_t lk) {
    AttnMask a;
    a.kind = Kind::kQK;
    a.bits = std::move(m);
    a.lq = lq;
    a.lk = lk;
    return a;
  }
  // mask[B x Lk], shared across heads and queries
  static AttnMask bk(std::vector<uint8_t> m, int64_t batch, int64_t heads,
                     int64_t lk) {
    AttnMask a;
    a.kind = Kind::kBK;
    a.bits = std::move(m);
    a.batch = batch;
    a.heads = heads;
    a.lk = lk;
    return a;
  }
};

// Softmax over the trailing axis. Fully-masked rows produce all-zero rows.
template <typename T>
TensorT<T> masked_softmax(const TensorT<T>& x, const AttnMask& mask) {
  if (x.rank() < 2) throw ShapeError("masked_softmax: rank must be >= 2");
  int64_t l = x.shape().back();
  int64_t rows = x.numel() / l;
  if (mask.kind == AttnMask::Kind::kQK) {
    if (mask.lk != l || static_cast<int64_t>(mask.bits.size()) != mask.lq * l)
      throw ShapeError("masked_softmax: QK mask size mismatch");
    if (rows % mask.lq != 0)
      throw ShapeError("masked_softmax: rows not a multiple of Lq");
  } else if (mask.kind == AttnMask::Kind::kBK) {
    if (mask.lk != l ||
        static_cast<int64_t>(mask.bits.size()) != mask.batch * l)
      throw ShapeError("masked_softmax: BK mask size mismatch");
    if (rows != mask.batch * mask.heads * (rows / (mask.batch * mask.heads)))
      throw ShapeError("masked_softmax: rows incompatible with batch/heads");
  }
  int64_t rows_per_batch =
      mask.kind == AttnMask::Kind::kBK ? rows / mask.batch : 0;

  auto out = detail::make_op<T>(
      "masked_softmax", x.shape(),
      [l, rows](TensorNode<T>& self) {
        // dx = y * (g - sum(g * y)); masked entries have y = 0.
        const T* g = self.grad.data();
        const T* y = self.data->data();
        T* gx = self.parents[0]->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = y + r * l;
          const T* gr = g + r * l;
          double dot = 0.0;
          for (int64_t j = 0; j < l; ++j)
            dot += static_cast<double>(gr[j] * yr[j]);
          T* gxr = gx + r * l;
          for (int64_t j = 0; j < l; ++j)
            gxr[j] += yr[j] * (gr[j] - static_cast<T>(dot));
        }
      },
      x);

  const T* px = x.ptr();
  T* po = out.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const uint8_t* mrow = nullptr;
    if (mask.kind == AttnMask::Kind::kQK)
      mrow = mask.bits.data() + (r % mask.lq) * l;
    else if (mask.kind == AttnMask::Kind::kBK)
      mrow = mask.bits.data() + (r / rows_per_batch) * l;
    const T* xr = px + r * l;
    T* yr = po + r * l;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < l; ++j)
      if (!mrow || mrow[j]) mx = std::max(mx, xr[j]);
    if (mx == -std::numeric_limits<T>::infinity()) {
      for (int64_t j = 0; j < l; ++j) yr[j] = T(0);
      continue;
    }
    double denom = 0.0;
    for (int64_t j = 0; j < l; ++j) {
      if (!mrow || mrow[j]) {
        yr[j] = std::exp(xr[j] - mx);
        denom += static_cast<double>(yr[j]);
      } else {
        yr[j] = T(0);
      }
    }
    T inv = static_cast<T>(1.0 / denom);
    for (int64_t j = 0; j < l; ++j) yr[j] *= inv;
  }
  return out;
}

// Scaled dot-product attention. q[B,h,Lq,d], k/v[B,h,Lk,d]; mask true=attend.
// A query whose keys are all masked yields a zero output row.
template <typename T>
TensorT<T> attention(const TensorT<T>& q, const TensorT<T>& k,
                     const TensorT<T>& v, const AttnMask& mask) {
  if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4)
    throw ShapeError("attention: q/k/v must be [B,h,L,d]");
  int64_t b = q.dim(0), h = q.dim(1), lq = q.dim(2), d = q.dim(3);
  int64_t lk = k.dim(2);
  if (k.dim(0) != b || k.dim(1) != h || k.dim(3) != d || v.dim(0) != b ||
      v.dim(1) != h || v.dim(2) != lk || v.dim(3) != d)
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " +
                     shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  auto q3 = reshape(q, {b * h, lq, d});
  auto k3 = reshape(k, {b * h, lk, d});
  auto v3 = reshape(v, {b * h, lk, d});
  auto scores = mul_scalar(bmm(q3, transpose_last2(k3)),
                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  auto weights = masked_softmax(scores, mask);
  return reshape(bmm(weights, v3), {b, h, lq, d});
}

template <typename T>
TensorT<T> attention(const TensorT<T>& q, const TensorT<T>& k,
                     const TensorT<T>& v) {
  return attention(q, k, v, AttnMask::none());
}

// Spec'd surface: boolean mask of shape [Lq x Lk], true = attend.
template <typename T>
TensorT<T> attention(const TensorT<T>& q, const TensorT<T>& k,
                     const TensorT<T>& v, const std::vector<uint8_t>& mask_qk) {
  int64_t lq = q.dim(2), lk = k.dim(2);
  if (static_cast<int64_t>(mask_qk.size()) != lq * lk)
    throw ShapeError("attention: mask must be [Lq x Lk]");
  return attention(q, k, v, AttnMask::qk(mask_qk, lq, lk));
}

// ---------------------------------------------------------------------------
// Spatial resampling
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> upsample_nearest2x(const TensorT<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2x: x must be 4-D");
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto out = detail::make_op<T>(
      "upsample_nearest2x", {b, c, 2 * h, 2 * w},
      [b, c, h, w](TensorNode<T>& self) {
        const T* g = self.grad.data();
        T* gx = self.parents[0]->ensure_grad();
        for (int64_t p = 0; p < b * c; ++p) {
          const T* gp = g + p * 4 * h * w;
          T* gxp = gx + p * h * w;
          for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx)
              gxp[y * w + xx] += gp[(2 * y) * 2 * w + 2 * xx] +
                                 gp[(2 * y) * 2 * w + 2 * xx + 1] +
                                 gp[(2 * y + 1) * 2 * w + 2 * xx] +
                                 gp[(2 * y + 1) * 2 * w + 2 * xx + 1];
        }
      },
      x);
  const T* px = x.ptr();
  T* po = out.ptr();
  for (int64_t p = 0; p < b * c; ++p) {
    const T* xp = px + p * h * w;
    T* op = po + p * 4 * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx) {
        T v = xp[y * w + xx];
        op[(2 * y) * 2 * w + 2 * xx] = v;
        op[(2 * y) * 2 * w + 2 * xx + 1] = v;
        op[(2 * y + 1) * 2 * w + 2 * xx] = v;
        op[(2 * y + 1) * 2 * w + 2 * xx + 1] = v;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Utilities
// ---------------------------------------------------------------------------

template <typename To, typename From>
TensorT<To> tensor_cast(const TensorT<From>& a) {
  std::vector<To> v(static_cast<size_t>(a.numel()));
  const From* p = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) v[i] = static_cast<To>(p[i]);
  return TensorT<To>::from(a.shape(), std::move(v));
}

template <typename T>
bool all_finite(const TensorT<T>& a) {
  for (T v : a.data())
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
T max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape("max_abs_diff", a, b);
  T m = T(0);
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.ptr()[i] - b.ptr()[i]));
  return m;
}

}  // namespace composer
