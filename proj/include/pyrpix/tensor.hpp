#pragma once

// Dense 64-bit tensors with taped reverse-mode automatic differentiation.
//
// Every tensor is a value handle onto an immutable buffer; operations build
// a DAG whose edges are owned by the outputs. backward() walks the DAG once
// in reverse topological order, accumulates dLoss/dLeaf into each
// requires-grad leaf, and then discards the tape. Layout is row-major with
// explicit strides, there are no aliasing views, and broadcasting follows
// the trailing-axis rule (a missing or size-1 axis stretches).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pyrpix/common.hpp"

namespace pyrpix {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Thread-local switch; when disabled, operations do not record tape nodes.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev); }
};

struct TensorImpl;
class Tensor;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // same length as data once touched

  // Tape edge, present only on op outputs while the graph is alive.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }

  void accumulate(const std::vector<double>& g) {
    ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (int64_t d : shape)
      if (d <= 0) throw ContractError("tensor shape must have positive extents, got " + shape_str(shape));
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw ContractError("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(impl);
  }

  static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
    return from_data(shape, std::vector<double>(static_cast<size_t>(numel_of(shape)), value), requires_grad);
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) { return full(shape, 0.0, requires_grad); }
  static Tensor ones(const Shape& shape, bool requires_grad = false) { return full(shape, 1.0, requires_grad); }

  /// Rank-0 scalar.
  static Tensor scalar(double v) { return from_data({}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return impl_->numel(); }
  int64_t extent(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }

  const std::vector<double>& data() const { return impl_->data; }
  /// Direct write access; only meaningful for leaves between training steps
  /// (optimizer updates, checkpoint loads). Never mutate a tensor that is
  /// part of a live graph.
  std::vector<double>& mutable_data() { return impl_->data; }

  double item() const {
    if (numel() != 1) throw ContractError("item() requires a one-element tensor, got shape " + shape_str(shape()));
    return impl_->data[0];
  }

  double at(std::initializer_list<int64_t> idx) const {
    return impl_->data[static_cast<size_t>(flat_index(idx))];
  }

  int64_t flat_index(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw ContractError("index rank mismatch for shape " + shape_str(shape()));
    int64_t flat = 0;
    int axis = 0;
    for (int64_t i : idx) {
      flat = flat * impl_->shape[static_cast<size_t>(axis)] + i;
      ++axis;
    }
    return flat;
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (impl_->grad.empty()) throw ContractError("tensor has no gradient (backward not run or not a grad path)");
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

  /// Copy of the values with no graph history and no grad requirement.
  Tensor detach() const { return from_data(impl_->shape, impl_->data, false); }

  Tensor clone() const { return from_data(impl_->shape, impl_->data, impl_->requires_grad); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace autodiff {

/// Assembles an op output: attaches parents and the backward function when
/// grad mode is on and some input needs gradients. Domain modules use this
/// to define their own differentiable kernels.
inline Tensor make_op(Shape shape, std::vector<double> data,
                      std::vector<Tensor> parents,
                      std::function<void(TensorImpl&)> backward_fn) {
  bool needs = false;
  if (GradMode::enabled())
    for (const Tensor& p : parents)
      if (p.requires_grad()) needs = true;
  Tensor out = Tensor::from_data(std::move(shape), std::move(data), needs);
  if (needs) {
    auto* impl = out.impl();
    impl->parents.reserve(parents.size());
    for (const Tensor& p : parents) impl->parents.push_back(p.impl_ptr());
    impl->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace autodiff

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

struct BroadcastPlan {
  Shape out;
  // Strides aligned to the output rank; 0 marks a stretched axis.
  std::vector<int64_t> stride_a, stride_b;
  bool same_shape = false;
  bool b_is_scalar = false;
};

inline BroadcastPlan broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same_shape = true;
    return plan;
  }
  if (numel_of(b) == 1 && b.size() <= a.size()) {
    plan.out = a;
    plan.b_is_scalar = true;
    return plan;
  }
  size_t rank = std::max(a.size(), b.size());
  plan.out.resize(rank);
  std::vector<int64_t> ea(rank, 1), eb(rank, 1);
  for (size_t i = 0; i < a.size(); ++i) ea[rank - a.size() + i] = a[i];
  for (size_t i = 0; i < b.size(); ++i) eb[rank - b.size() + i] = b[i];
  for (size_t i = 0; i < rank; ++i) {
    if (ea[i] == eb[i])
      plan.out[i] = ea[i];
    else if (ea[i] == 1)
      plan.out[i] = eb[i];
    else if (eb[i] == 1)
      plan.out[i] = ea[i];
    else
      throw ContractError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                          " are not broadcastable");
  }
  std::vector<int64_t> sa = row_major_strides(ea), sb = row_major_strides(eb);
  plan.stride_a.resize(rank);
  plan.stride_b.resize(rank);
  for (size_t i = 0; i < rank; ++i) {
    plan.stride_a[i] = ea[i] == 1 ? 0 : sa[i];
    plan.stride_b[i] = eb[i] == 1 ? 0 : sb[i];
  }
  return plan;
}

/// Walks an output-shaped iteration space while tracking the flat offsets of
/// two broadcast operands.
template <typename Fn>
inline void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
  const Shape& out = plan.out;
  size_t rank = out.size();
  int64_t total = numel_of(out);
  std::vector<int64_t> coord(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t o = 0; o < total; ++o) {
    fn(o, ia, ib);
    for (int i = static_cast<int>(rank) - 1; i >= 0; --i) {
      size_t ui = static_cast<size_t>(i);
      ++coord[ui];
      ia += plan.stride_a[ui];
      ib += plan.stride_b[ui];
      if (coord[ui] < out[ui]) break;
      ia -= plan.stride_a[ui] * out[ui];
      ib -= plan.stride_b[ui] * out[ui];
      coord[ui] = 0;
    }
  }
}

using EigenRowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise operations
// ---------------------------------------------------------------------------

namespace detail {

// fwd(a,b) -> value; da(g,a,b) and db(g,a,b) -> partial contributions.
template <typename Fwd, typename Da, typename Db>
inline Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  BroadcastPlan plan = broadcast_shapes(a.shape(), b.shape(), name);
  int64_t n = numel_of(plan.out);
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  if (plan.same_shape) {
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(pa[i], pb[i]);
  } else if (plan.b_is_scalar) {
    double bv = pb[0];
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(pa[i], bv);
  } else {
    for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) {
      out[static_cast<size_t>(o)] = fwd(pa[ia], pb[ib]);
    });
  }
  return autodiff::make_op(
      plan.out, std::move(out), {a, b},
      [plan, fwd, da, db](TensorImpl& self) {
        auto& pa_impl = self.parents[0];
        auto& pb_impl = self.parents[1];
        const double* av = pa_impl->data.data();
        const double* bv = pb_impl->data.data();
        const double* g = self.grad.data();
        int64_t n = self.numel();
        if (pa_impl->requires_grad) {
          pa_impl->ensure_grad();
          double* ga = pa_impl->grad.data();
          if (plan.same_shape || plan.b_is_scalar) {
            if (plan.same_shape)
              for (int64_t i = 0; i < n; ++i) ga[i] += da(g[i], av[i], bv[i]);
            else
              for (int64_t i = 0; i < n; ++i) ga[i] += da(g[i], av[i], bv[0]);
          } else {
            for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) {
              ga[ia] += da(g[o], av[ia], bv[ib]);
            });
          }
        }
        if (pb_impl->requires_grad) {
          pb_impl->ensure_grad();
          double* gb = pb_impl->grad.data();
          if (plan.same_shape) {
            for (int64_t i = 0; i < n; ++i) gb[i] += db(g[i], av[i], bv[i]);
          } else if (plan.b_is_scalar) {
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += db(g[i], av[i], bv[0]);
            gb[0] += acc;
          } else {
            for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) {
              gb[ib] += db(g[o], av[ia], bv[ib]);
            });
          }
        }
      });
}

// fwd(x) -> y; dfn(g, x, y) -> dL/dx contribution.
template <typename Fwd, typename Dfn>
inline Tensor unary_op(const Tensor& x, Fwd fwd, Dfn dfn) {
  int64_t n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = x.data().data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(px[i]);
  return autodiff::make_op(x.shape(), std::move(out), {x}, [dfn](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    const double* xv = p->data.data();
    const double* yv = self.data.data();
    double* gx = p->grad.data();
    int64_t n = self.numel();
    for (int64_t i = 0; i < n; ++i) gx[i] += dfn(g[i], xv[i], yv[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; }, [](double g, double x, double) { return g * x; });
}

/// Plain division: no epsilon at this level; callers own their guards.
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

inline Tensor add(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor sub(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor mul(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor div(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add(a, s); }

inline Tensor neg(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return -v; }, [](double g, double, double) { return -g; });
}
inline Tensor operator-(const Tensor& x) { return neg(x); }

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::exp(v); },
                          [](double g, double, double y) { return g * y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::log(v); },
                          [](double g, double xv, double) { return g / xv; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::sqrt(v); },
                          [](double g, double, double y) { return 0.5 * g / y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                          [](double g, double xv, double) { return xv > 0.0 ? g : 0.0; });
}

/// Numerically stable logistic; gradient uses y(1-y).
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

struct ReducePlan {
  Shape out_shape;          // with keepdim applied
  Shape kept_shape;         // reduced axes as size 1 (internal mapping shape)
  std::vector<int64_t> map; // input flat index -> output flat index
  int64_t count = 1;        // elements folded into one output
};

inline ReducePlan reduce_plan(const Shape& in, std::vector<int> axes, bool keepdim) {
  if (axes.empty()) throw ContractError("reduce: empty axis list");
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end())
    throw ContractError("reduce: duplicate axis");
  std::vector<bool> reduced(in.size(), false);
  ReducePlan plan;
  for (int ax : axes) {
    if (ax < 0 || ax >= static_cast<int>(in.size()))
      throw ContractError("reduce: axis " + std::to_string(ax) + " invalid for shape " + shape_str(in));
    reduced[static_cast<size_t>(ax)] = true;
    plan.count *= in[static_cast<size_t>(ax)];
  }
  plan.kept_shape = in;
  for (int ax : axes) plan.kept_shape[static_cast<size_t>(ax)] = 1;
  if (keepdim) {
    plan.out_shape = plan.kept_shape;
  } else {
    for (size_t i = 0; i < in.size(); ++i)
      if (!reduced[i]) plan.out_shape.push_back(in[i]);
    // reducing every axis yields a rank-0 scalar
  }
  // flat map from input positions to output positions
  std::vector<int64_t> kept_strides = row_major_strides(plan.kept_shape);
  int64_t total = numel_of(in);
  plan.map.resize(static_cast<size_t>(total));
  std::vector<int64_t> coord(in.size(), 0);
  int64_t oidx = 0;
  for (int64_t i = 0; i < total; ++i) {
    plan.map[static_cast<size_t>(i)] = oidx;
    for (int d = static_cast<int>(in.size()) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      ++coord[ud];
      if (!reduced[ud]) oidx += kept_strides[ud];
      if (coord[ud] < in[ud]) break;
      if (!reduced[ud]) oidx -= kept_strides[ud] * in[ud];
      coord[ud] = 0;
    }
  }
  return plan;
}

}  // namespace detail

inline Tensor sum(const Tensor& t, const std::vector<int>& axes, bool keepdim = false) {
  detail::ReducePlan plan = detail::reduce_plan(t.shape(), axes, keepdim);
  std::vector<double> out(static_cast<size_t>(numel_of(plan.out_shape)), 0.0);
  const double* p = t.data().data();
  for (int64_t i = 0; i < t.numel(); ++i) out[static_cast<size_t>(plan.map[static_cast<size_t>(i)])] += p[i];
  auto map = plan.map;
  return autodiff::make_op(plan.out_shape, std::move(out), {t}, [map](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    double* gx = p->grad.data();
    for (int64_t i = 0; i < p->numel(); ++i) gx[i] += g[map[static_cast<size_t>(i)]];
  });
}

inline Tensor mean(const Tensor& t, const std::vector<int>& axes, bool keepdim = false) {
  detail::ReducePlan plan = detail::reduce_plan(t.shape(), axes, keepdim);
  std::vector<double> out(static_cast<size_t>(numel_of(plan.out_shape)), 0.0);
  const double* p = t.data().data();
  for (int64_t i = 0; i < t.numel(); ++i) out[static_cast<size_t>(plan.map[static_cast<size_t>(i)])] += p[i];
  double inv = 1.0 / static_cast<double>(plan.count);
  for (double& v : out) v *= inv;
  auto map = plan.map;
  return autodiff::make_op(plan.out_shape, std::move(out), {t}, [map, inv](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    double* gx = p->grad.data();
    for (int64_t i = 0; i < p->numel(); ++i) gx[i] += inv * g[map[static_cast<size_t>(i)]];
  });
}

/// Population variance (divide by count).
inline Tensor variance(const Tensor& t, const std::vector<int>& axes, bool keepdim = false) {
  detail::ReducePlan plan = detail::reduce_plan(t.shape(), axes, keepdim);
  int64_t out_n = numel_of(plan.out_shape);
  std::vector<double> mu(static_cast<size_t>(out_n), 0.0);
  const double* p = t.data().data();
  for (int64_t i = 0; i < t.numel(); ++i) mu[static_cast<size_t>(plan.map[static_cast<size_t>(i)])] += p[i];
  double inv = 1.0 / static_cast<double>(plan.count);
  for (double& v : mu) v *= inv;
  std::vector<double> out(static_cast<size_t>(out_n), 0.0);
  for (int64_t i = 0; i < t.numel(); ++i) {
    double d = p[i] - mu[static_cast<size_t>(plan.map[static_cast<size_t>(i)])];
    out[static_cast<size_t>(plan.map[static_cast<size_t>(i)])] += d * d;
  }
  for (double& v : out) v *= inv;
  auto map = plan.map;
  // d var / d x_i = 2 (x_i - mu) / count; the mean-dependence terms cancel.
  return autodiff::make_op(plan.out_shape, std::move(out), {t}, [map, inv](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    int64_t n = p->numel();
    const double* x = p->data.data();
    std::vector<double> mu(self.data.size(), 0.0);
    for (int64_t i = 0; i < n; ++i) mu[static_cast<size_t>(map[static_cast<size_t>(i)])] += x[i];
    for (double& v : mu) v *= inv;
    const double* g = self.grad.data();
    double* gx = p->grad.data();
    for (int64_t i = 0; i < n; ++i) {
      int64_t o = map[static_cast<size_t>(i)];
      gx[i] += g[o] * 2.0 * inv * (x[i] - mu[static_cast<size_t>(o)]);
    }
  });
}

/// Max along one axis; ties route the gradient to the first maximum.
inline Tensor max_along(const Tensor& t, int axis, bool keepdim = false) {
  detail::ReducePlan plan = detail::reduce_plan(t.shape(), {axis}, keepdim);
  int64_t out_n = numel_of(plan.out_shape);
  std::vector<double> out(static_cast<size_t>(out_n), -std::numeric_limits<double>::infinity());
  std::vector<int64_t> arg(static_cast<size_t>(out_n), -1);
  const double* p = t.data().data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    int64_t o = plan.map[static_cast<size_t>(i)];
    if (p[i] > out[static_cast<size_t>(o)]) {
      out[static_cast<size_t>(o)] = p[i];
      arg[static_cast<size_t>(o)] = i;
    }
  }
  return autodiff::make_op(plan.out_shape, std::move(out), {t}, [arg](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    double* gx = p->grad.data();
    for (size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += g[o];
  });
}

inline Tensor sum(const Tensor& t) {
  std::vector<int> axes(static_cast<size_t>(t.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  if (axes.empty()) return t;  // rank-0 already scalar
  return sum(t, axes, false);
}

inline Tensor mean(const Tensor& t) {
  std::vector<int> axes(static_cast<size_t>(t.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  if (axes.empty()) return t;
  return mean(t, axes, false);
}

inline Tensor variance(const Tensor& t) {
  std::vector<int> axes(static_cast<size_t>(t.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  if (axes.empty()) throw ContractError("variance of a scalar is undefined");
  return variance(t, axes, false);
}

// ---------------------------------------------------------------------------
// shape operations
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& t, const Shape& shape) {
  if (numel_of(shape) != t.numel())
    throw ContractError("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
  return autodiff::make_op(shape, t.data(), {t}, [](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->accumulate(self.grad);
  });
}

inline Tensor transpose2d(const Tensor& t) {
  if (t.rank() != 2) throw ContractError("transpose2d requires rank 2, got " + shape_str(t.shape()));
  int64_t r = t.extent(0), c = t.extent(1);
  std::vector<double> out(static_cast<size_t>(r * c));
  const double* p = t.data().data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j * r + i)] = p[i * c + j];
  return autodiff::make_op({c, r}, std::move(out), {t}, [r, c](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    double* gx = p->grad.data();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(ref.size()))
    throw ContractError("concat: axis " + std::to_string(axis) + " invalid for shape " + shape_str(ref));
  Shape out_shape = ref;
  int64_t cat_extent = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != static_cast<int>(ref.size()))
      throw ContractError("concat: rank mismatch between " + shape_str(ref) + " and " + shape_str(p.shape()));
    for (size_t d = 0; d < ref.size(); ++d)
      if (static_cast<int>(d) != axis && p.shape()[d] != ref[d])
        throw ContractError("concat: shapes " + shape_str(ref) + " and " + shape_str(p.shape()) +
                            " differ off the concat axis");
    cat_extent += p.shape()[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = cat_extent;

  // outer x cat x inner decomposition
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= ref[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < ref.size(); ++d) inner *= ref[d];

  std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));
  std::vector<int64_t> extents;
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    int64_t e = p.shape()[static_cast<size_t>(axis)];
    extents.push_back(e);
    const double* src = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(src + o * e * inner, src + (o + 1) * e * inner,
                out.begin() + (o * cat_extent + offset) * inner);
    offset += e;
  }
  return autodiff::make_op(out_shape, std::move(out), parts,
                           [outer, inner, cat_extent, extents](TensorImpl& self) {
    const double* g = self.grad.data();
    int64_t offset = 0;
    for (size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = self.parents[k];
      int64_t e = extents[k];
      if (p->requires_grad) {
        p->ensure_grad();
        double* gx = p->grad.data();
        for (int64_t o = 0; o < outer; ++o) {
          const double* gs = g + (o * cat_extent + offset) * inner;
          double* gd = gx + o * e * inner;
          for (int64_t i = 0; i < e * inner; ++i) gd[i] += gs[i];
        }
      }
      offset += e;
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ContractError("matmul requires rank-2 operands, got " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
  int64_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    throw ContractError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m * n));
  {
    detail::ConstMatMap A(a.data().data(), m, k), B(b.data().data(), k, n);
    detail::MatMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  return autodiff::make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    detail::ConstMatMap G(self.grad.data(), m, n);
    if (pa->requires_grad) {
      pa->ensure_grad();
      detail::ConstMatMap B(pb->data.data(), k, n);
      detail::MatMap GA(pa->grad.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      detail::ConstMatMap A(pa->data.data(), m, k);
      detail::MatMap GB(pb->grad.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  int64_t B, C, H, W, F, KH, KW, OH, OW;
  int stride, pad;
};

/// floor((extent + 2*pad - k) / stride) + 1, guarded against non-fitting windows.
inline int64_t conv_out_extent(int64_t extent, int64_t k, int stride, int pad, const char* what) {
  int64_t span = extent + 2 * pad - k;
  if (span < 0)
    throw ContractError(std::string(what) + ": window of size " + std::to_string(k) +
                        " does not fit extent " + std::to_string(extent) + " with pad " + std::to_string(pad));
  return span / stride + 1;
}

inline void im2col(const double* x, const ConvDims& d, double* col) {
  // col is [C*KH*KW, OH*OW] row-major
  int64_t L = d.OH * d.OW;
  for (int64_t c = 0; c < d.C; ++c) {
    for (int64_t ky = 0; ky < d.KH; ++ky) {
      for (int64_t kx = 0; kx < d.KW; ++kx) {
        double* row = col + ((c * d.KH + ky) * d.KW + kx) * L;
        for (int64_t oy = 0; oy < d.OH; ++oy) {
          int64_t iy = oy * d.stride - d.pad + ky;
          double* dst = row + oy * d.OW;
          if (iy < 0 || iy >= d.H) {
            std::fill(dst, dst + d.OW, 0.0);
            continue;
          }
          const double* src = x + (c * d.H + iy) * d.W;
          for (int64_t ox = 0; ox < d.OW; ++ox) {
            int64_t ix = ox * d.stride - d.pad + kx;
            dst[ox] = (ix >= 0 && ix < d.W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_accumulate(const double* col, const ConvDims& d, double* gx) {
  int64_t L = d.OH * d.OW;
  for (int64_t c = 0; c < d.C; ++c) {
    for (int64_t ky = 0; ky < d.KH; ++ky) {
      for (int64_t kx = 0; kx < d.KW; ++kx) {
        const double* row = col + ((c * d.KH + ky) * d.KW + kx) * L;
        for (int64_t oy = 0; oy < d.OH; ++oy) {
          int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.H) continue;
          double* dst = gx + (c * d.H + iy) * d.W;
          const double* src = row + oy * d.OW;
          for (int64_t ox = 0; ox < d.OW; ++ox) {
            int64_t ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution, zero padding, no bias. Accepts [C,H,W] or [B,C,H,W]
/// input; the kernel is [F,C,kh,kw] with odd kh, kw.
inline Tensor conv2d(const Tensor& x_in, const Tensor& w, int stride = 1, int pad = 0) {
  bool unbatched = x_in.rank() == 3;
  Tensor x = unbatched ? reshape(x_in, {1, x_in.extent(0), x_in.extent(1), x_in.extent(2)}) : x_in;
  if (x.rank() != 4) throw ContractError("conv2d: input must be rank 3 or 4, got " + shape_str(x_in.shape()));
  if (w.rank() != 4) throw ContractError("conv2d: kernel must be rank 4, got " + shape_str(w.shape()));
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (pad < 0) throw ContractError("conv2d: pad must be >= 0");
  detail::ConvDims d;
  d.B = x.extent(0);
  d.C = x.extent(1);
  d.H = x.extent(2);
  d.W = x.extent(3);
  d.F = w.extent(0);
  d.KH = w.extent(2);
  d.KW = w.extent(3);
  d.stride = stride;
  d.pad = pad;
  if (w.extent(1) != d.C)
    throw ContractError("conv2d: input channels " + shape_str(x.shape()) + " do not match kernel " +
                        shape_str(w.shape()));
  if (d.KH % 2 == 0 || d.KW % 2 == 0)
    throw ContractError("conv2d: kernel extents must be odd, got " + shape_str(w.shape()));
  d.OH = detail::conv_out_extent(d.H, d.KH, stride, pad, "conv2d");
  d.OW = detail::conv_out_extent(d.W, d.KW, stride, pad, "conv2d");

  int64_t CKK = d.C * d.KH * d.KW;
  int64_t L = d.OH * d.OW;
  std::vector<double> out(static_cast<size_t>(d.B * d.F * L));
  {
    std::vector<double> col(static_cast<size_t>(CKK * L));
    detail::ConstMatMap W(w.data().data(), d.F, CKK);
    for (int64_t b = 0; b < d.B; ++b) {
      detail::im2col(x.data().data() + b * d.C * d.H * d.W, d, col.data());
      detail::ConstMatMap Col(col.data(), CKK, L);
      detail::MatMap O(out.data() + b * d.F * L, d.F, L);
      O.noalias() = W * Col;
    }
  }
  Tensor y = autodiff::make_op({d.B, d.F, d.OH, d.OW}, std::move(out), {x, w}, [d, CKK, L](TensorImpl& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    std::vector<double> col(static_cast<size_t>(CKK * L));
    bool need_x = px->requires_grad, need_w = pw->requires_grad;
    if (need_x) px->ensure_grad();
    if (need_w) pw->ensure_grad();
    detail::ConstMatMap W(pw->data.data(), d.F, CKK);
    std::vector<double> dcol(need_x ? static_cast<size_t>(CKK * L) : 0);
    for (int64_t b = 0; b < d.B; ++b) {
      detail::ConstMatMap G(self.grad.data() + b * d.F * L, d.F, L);
      if (need_w) {
        detail::im2col(px->data.data() + b * d.C * d.H * d.W, d, col.data());
        detail::ConstMatMap Col(col.data(), CKK, L);
        detail::MatMap GW(pw->grad.data(), d.F, CKK);
        GW.noalias() += G * Col.transpose();
      }
      if (need_x) {
        detail::MatMap DCol(dcol.data(), CKK, L);
        DCol.noalias() = W.transpose() * G;
        detail::col2im_accumulate(dcol.data(), d, px->grad.data() + b * d.C * d.H * d.W);
      }
    }
  });
  if (unbatched) return reshape(y, {d.F, d.OH, d.OW});
  return y;
}

/// Max pooling over square windows; padding cells never win.
inline Tensor maxpool2d(const Tensor& x, int ksize, int stride, int pad = 0) {
  if (x.rank() != 4) throw ContractError("maxpool2d: input must be rank 4, got " + shape_str(x.shape()));
  int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  int64_t OH = detail::conv_out_extent(H, ksize, stride, pad, "maxpool2d");
  int64_t OW = detail::conv_out_extent(W, ksize, stride, pad, "maxpool2d");
  std::vector<double> out(static_cast<size_t>(B * C * OH * OW));
  std::vector<int64_t> arg(out.size());
  const double* p = x.data().data();
  int64_t o = 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const double* plane = p + (b * C + c) * H * W;
      int64_t base = (b * C + c) * H * W;
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t best_i = -1;
          for (int64_t ky = 0; ky < ksize; ++ky) {
            int64_t iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < ksize; ++kx) {
              int64_t ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              double v = plane[iy * W + ix];
              if (v > best) {
                best = v;
                best_i = base + iy * W + ix;
              }
            }
          }
          out[static_cast<size_t>(o)] = best;
          arg[static_cast<size_t>(o)] = best_i;
        }
    }
  return autodiff::make_op({B, C, OH, OW}, std::move(out), {x}, [arg](TensorImpl& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double* g = self.grad.data();
    double* gx = p->grad.data();
    for (size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
  });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Visits every reachable tape node
/// exactly once in reverse topological order, accumulates gradients into
/// requires-grad tensors, then frees the tape. Gradients accumulate across
/// calls until zero_grad().
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // nothing reaches a parameter

  // iterative post-order DFS: children after parents, then reversed
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.impl(), 0});
  visited.insert(loss.impl());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next_parent++].get();
      if (!visited.count(p) && (p->backward_fn || p->requires_grad)) {
        if (p->backward_fn) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  // the tape is single-use: drop edges so activations can be reclaimed
  for (TensorImpl* node : order) {
    node->backward_fn = nullptr;
    node->parents.clear();
  }
}

}  // namespace pyrpix
