#pragma once

#include <algorithm>
#include <functional>
#include <span>
#include <vector>

#include "nsat/errors.hpp"
#include "nsat/tensor.hpp"

namespace nsat {

namespace detail {

// |a - n| / max(1, |a|, |n|): relative for large gradients, absolute near
// zero, where central differences are accurate to ~1e-9 anyway.
inline double grad_error(double analytic, double numeric) {
  double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace detail

// Compares the reverse-mode gradient of a scalar-valued f against central
// finite differences at every coordinate of x; returns the worst error.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step = 1e-5) {
  Tensor xp = Tensor::from(x.shape(), x.value(), true);
  Tensor y = f(xp);
  if (y.numel() != 1)
    throw ContractError("grad_check: f must produce a scalar, got shape " +
                        shape_str(y.shape()));
  y.backward();
  std::vector<double> analytic = xp.has_grad()
                                     ? xp.grad()
                                     : std::vector<double>(x.numel(), 0.0);

  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor hi = Tensor::from(x.shape(), x.value(), false);
    hi.mutable_value()[i] += step;
    Tensor lo = Tensor::from(x.shape(), x.value(), false);
    lo.mutable_value()[i] -= step;
    double numeric = (f(hi).item() - f(lo).item()) / (2.0 * step);
    worst = std::max(worst, detail::grad_error(analytic[i], numeric));
  }
  return worst;
}

// Same check for a loss closure over a set of live parameter tensors
// (perturbed in place and restored). Used for whole-model verification.
inline double grad_check_params(const std::function<Tensor()>& f,
                                std::span<Tensor> params, double step = 1e-5) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor y = f();
  if (y.numel() != 1)
    throw ContractError("grad_check_params: f must produce a scalar");
  y.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad()
                                    : std::vector<double>(p.numel(), 0.0));

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& buf = params[k].mutable_value();
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const double keep = buf[i];
      buf[i] = keep + step;
      double fhi = f().item();
      buf[i] = keep - step;
      double flo = f().item();
      buf[i] = keep;
      double numeric = (fhi - flo) / (2.0 * step);
      worst = std::max(worst, detail::grad_error(analytic[k][i], numeric));
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace nsat
