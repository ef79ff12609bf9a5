#pragma once

// Central finite-difference gradient verification. The numeric side here is
// deliberately independent of the analytic backward pass: it only re-runs
// forward evaluations at perturbed parameter values.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pyrpix/rng.hpp"
#include "pyrpix/tensor.hpp"

namespace pyrpix {

struct GradCheckReport {
  std::string group;
  double max_rel_err = 0.0;
  int64_t checked = 0;
  // location of the worst element, for diagnostics
  std::string worst_detail;
};

namespace gradcheck_detail {

inline double rel_err(double analytic, double numeric) {
  double denom = std::max(std::abs(analytic), std::abs(numeric));
  if (denom < 1e-7) return 0.0;  // both effectively zero
  return std::abs(analytic - numeric) / denom;
}

}  // namespace gradcheck_detail

/// Checks d(loss)/d(param[i]) for the given elements of one parameter tensor.
/// `loss_builder` must rebuild the graph from current parameter values.
/// h follows the spec'd central-difference step.
inline GradCheckReport check_gradient_elements(const std::function<Tensor()>& loss_builder,
                                               Tensor param,
                                               const std::vector<int64_t>& elements,
                                               const std::string& group,
                                               double h = 1e-5) {
  GradCheckReport report;
  report.group = group;

  param.zero_grad();
  Tensor loss = loss_builder();
  backward(loss);
  std::vector<double> analytic = param.has_grad() ? param.grad() : std::vector<double>(param.data().size(), 0.0);

  for (int64_t idx : elements) {
    double saved = param.mutable_data()[static_cast<size_t>(idx)];
    double fplus, fminus;
    {
      NoGradGuard off;
      param.mutable_data()[static_cast<size_t>(idx)] = saved + h;
      fplus = loss_builder().item();
      param.mutable_data()[static_cast<size_t>(idx)] = saved - h;
      fminus = loss_builder().item();
      param.mutable_data()[static_cast<size_t>(idx)] = saved;
    }
    double numeric = (fplus - fminus) / (2.0 * h);
    double rel = gradcheck_detail::rel_err(analytic[static_cast<size_t>(idx)], numeric);
    ++report.checked;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_detail = group + "[" + std::to_string(idx) + "] analytic=" +
                            fmt_double(analytic[static_cast<size_t>(idx)]) + " numeric=" + fmt_double(numeric);
    }
  }
  return report;
}

/// Checks every element of the parameter.
inline GradCheckReport check_gradient_full(const std::function<Tensor()>& loss_builder, Tensor param,
                                           const std::string& group, double h = 1e-5) {
  std::vector<int64_t> all(static_cast<size_t>(param.numel()));
  for (int64_t i = 0; i < param.numel(); ++i) all[static_cast<size_t>(i)] = i;
  return check_gradient_elements(loss_builder, param, all, group, h);
}

/// Checks a random sample of elements (all of them when the tensor is small).
inline GradCheckReport check_gradient_sampled(const std::function<Tensor()>& loss_builder, Tensor param,
                                              int64_t samples, Rng& rng, const std::string& group,
                                              double h = 1e-5) {
  int64_t n = param.numel();
  if (samples >= n) return check_gradient_full(loss_builder, param, group, h);
  std::vector<int64_t> chosen;
  chosen.reserve(static_cast<size_t>(samples));
  for (int64_t s = 0; s < samples; ++s) chosen.push_back(rng.uniform_int(0, n - 1));
  return check_gradient_elements(loss_builder, param, chosen, group, h);
}

inline GradCheckReport merge_reports(const std::vector<GradCheckReport>& parts, const std::string& group) {
  GradCheckReport out;
  out.group = group;
  for (const auto& r : parts) {
    out.checked += r.checked;
    if (r.max_rel_err > out.max_rel_err) {
      out.max_rel_err = r.max_rel_err;
      out.worst_detail = r.worst_detail;
    }
  }
  return out;
}

}  // namespace pyrpix
