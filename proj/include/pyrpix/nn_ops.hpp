#pragma once

// Shared neural-net kernels that need hand-written backward passes.

#include <cmath>
#include <vector>

#include "pyrpix/tensor.hpp"

namespace pyrpix {

namespace detail {

inline void bn_channel_geometry(const Shape& s, int64_t& channels, int64_t& inner) {
  if (s.size() < 2) throw ContractError("batch_norm: input must have a channel axis, got " + shape_str(s));
  channels = s[1];
  inner = 1;
  for (size_t i = 2; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

/// Batch normalization over every axis except the channel axis (axis 1),
/// population-variance convention. Returns gamma * (x - mu)/sqrt(var + eps)
/// + beta and reports the batch statistics so the caller can maintain
/// running averages outside the graph.
inline Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                               std::vector<double>* batch_mean = nullptr,
                               std::vector<double>* batch_var = nullptr) {
  int64_t C, inner;
  detail::bn_channel_geometry(x.shape(), C, inner);
  if (gamma.numel() != C || beta.numel() != C)
    throw ContractError("batch_norm: affine parameters must have one entry per channel");
  int64_t n = x.numel();
  int64_t per_channel = n / C;
  const double* px = x.data().data();

  std::vector<double> mu(static_cast<size_t>(C), 0.0), var(static_cast<size_t>(C), 0.0);
  for (int64_t i = 0; i < n; ++i) mu[static_cast<size_t>((i / inner) % C)] += px[i];
  for (double& v : mu) v /= static_cast<double>(per_channel);
  for (int64_t i = 0; i < n; ++i) {
    size_t c = static_cast<size_t>((i / inner) % C);
    double d = px[i] - mu[c];
    var[c] += d * d;
  }
  for (double& v : var) v /= static_cast<double>(per_channel);
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;

  std::vector<double> inv_std(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);

  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    size_t c = static_cast<size_t>((i / inner) % C);
    out[static_cast<size_t>(i)] = pg[c] * (px[i] - mu[c]) * inv_std[c] + pb[c];
  }

  return autodiff::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [C, inner, per_channel, mu, inv_std](TensorImpl& self) {
        auto& px_impl = self.parents[0];
        auto& pg_impl = self.parents[1];
        auto& pb_impl = self.parents[2];
        int64_t n = self.numel();
        const double* x = px_impl->data.data();
        const double* g = self.grad.data();
        const double* gm = pg_impl->data.data();

        // per-channel sums of g and g*xhat
        std::vector<double> sum_g(static_cast<size_t>(C), 0.0), sum_gx(static_cast<size_t>(C), 0.0);
        for (int64_t i = 0; i < n; ++i) {
          size_t c = static_cast<size_t>((i / inner) % C);
          double xhat = (x[i] - mu[c]) * inv_std[c];
          sum_g[c] += g[i];
          sum_gx[c] += g[i] * xhat;
        }
        if (pb_impl->requires_grad) {
          pb_impl->ensure_grad();
          for (int64_t c = 0; c < C; ++c) pb_impl->grad[static_cast<size_t>(c)] += sum_g[static_cast<size_t>(c)];
        }
        if (pg_impl->requires_grad) {
          pg_impl->ensure_grad();
          for (int64_t c = 0; c < C; ++c) pg_impl->grad[static_cast<size_t>(c)] += sum_gx[static_cast<size_t>(c)];
        }
        if (px_impl->requires_grad) {
          px_impl->ensure_grad();
          double invN = 1.0 / static_cast<double>(per_channel);
          double* gx = px_impl->grad.data();
          for (int64_t i = 0; i < n; ++i) {
            size_t c = static_cast<size_t>((i / inner) % C);
            double xhat = (x[i] - mu[c]) * inv_std[c];
            gx[i] += gm[c] * inv_std[c] * (g[i] - invN * sum_g[c] - xhat * invN * sum_gx[c]);
          }
        }
      });
}

/// Inference-mode batch normalization against fixed statistics.
inline Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              const std::vector<double>& running_mean, const std::vector<double>& running_var,
                              double eps) {
  int64_t C, inner;
  detail::bn_channel_geometry(x.shape(), C, inner);
  if (static_cast<int64_t>(running_mean.size()) != C || static_cast<int64_t>(running_var.size()) != C)
    throw ContractError("batch_norm: running statistics must have one entry per channel");
  // affine transform with constant per-channel scale/shift
  std::vector<double> scale(static_cast<size_t>(C)), shift(static_cast<size_t>(C));
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  for (int64_t c = 0; c < C; ++c) {
    size_t uc = static_cast<size_t>(c);
    scale[uc] = pg[uc] / std::sqrt(running_var[uc] + eps);
    shift[uc] = pb[uc] - running_mean[uc] * scale[uc];
  }
  int64_t n = x.numel();
  const double* px = x.data().data();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    size_t c = static_cast<size_t>((i / inner) % C);
    out[static_cast<size_t>(i)] = px[i] * scale[c] + shift[c];
  }
  std::vector<double> inv_std(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(running_var[static_cast<size_t>(c)] + eps);
  auto rm = running_mean;
  return autodiff::make_op(x.shape(), std::move(out), {x, gamma, beta},
                           [C, inner, rm, inv_std](TensorImpl& self) {
    auto& px_impl = self.parents[0];
    auto& pg_impl = self.parents[1];
    auto& pb_impl = self.parents[2];
    int64_t n = self.numel();
    const double* g = self.grad.data();
    const double* x = px_impl->data.data();
    const double* gm = pg_impl->data.data();
    if (px_impl->requires_grad) {
      px_impl->ensure_grad();
      double* gx = px_impl->grad.data();
      for (int64_t i = 0; i < n; ++i) {
        size_t c = static_cast<size_t>((i / inner) % C);
        gx[i] += g[i] * gm[c] * inv_std[c];
      }
    }
    if (pg_impl->requires_grad || pb_impl->requires_grad) {
      std::vector<double> sum_g(static_cast<size_t>(C), 0.0), sum_gx(static_cast<size_t>(C), 0.0);
      for (int64_t i = 0; i < n; ++i) {
        size_t c = static_cast<size_t>((i / inner) % C);
        sum_g[c] += g[i];
        sum_gx[c] += g[i] * (x[i] - rm[c]) * inv_std[c];
      }
      if (pb_impl->requires_grad) {
        pb_impl->ensure_grad();
        for (int64_t c = 0; c < C; ++c) pb_impl->grad[static_cast<size_t>(c)] += sum_g[static_cast<size_t>(c)];
      }
      if (pg_impl->requires_grad) {
        pg_impl->ensure_grad();
        for (int64_t c = 0; c < C; ++c) pg_impl->grad[static_cast<size_t>(c)] += sum_gx[static_cast<size_t>(c)];
      }
    }
  });
}

}  // namespace pyrpix
