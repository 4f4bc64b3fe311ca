#pragma once
// Central-difference verification of tape gradients.

#include <functional>

#include "defmatch/ops.hpp"

namespace defmatch {

// Max elementwise |analytic - numeric| / max(1, |analytic|) for a scalar-valued
// f evaluated at x.  eps must land in [1e-6, 1e-3]; callers pick points away
// from clamp and kink locations.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps out of range");

  Tensor probe = x.detached();
  probe.set_requires_grad(true);
  std::vector<double> analytic;
  {
    GradTape tape;
    Tensor y = f(probe);
    if (y.size() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    if (!std::isfinite(y.value())) throw std::runtime_error("grad_check: non-finite value");
    tape.backward(y);
    analytic = probe.grad();
  }

  Tensor work = x.detached();
  double worst = 0.0;
  for (std::int64_t i = 0; i < work.size(); ++i) {
    const double saved = work.data()[i];
    work.data()[i] = saved + eps;
    const double yp = f(work).value();
    work.data()[i] = saved - eps;
    const double ym = f(work).value();
    work.data()[i] = saved;
    if (!std::isfinite(yp) || !std::isfinite(ym))
      throw std::runtime_error("grad_check: non-finite value under perturbation");
    const double numeric = (yp - ym) / (2.0 * eps);
    const double a = analytic[static_cast<std::size_t>(i)];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace defmatch
