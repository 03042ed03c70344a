#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "celldino/error.hpp"
#include "celldino/rng.hpp"
#include "celldino/tensor.hpp"

namespace celldino {

// Central-difference gradient check, always in double. The op under test is
// given as a forward plus an analytic vector-Jacobian product; the check
// projects the output onto a random direction u and compares bwd(x, u)
// against finite differences of u . fwd(x), coordinate by coordinate.
struct GradCheck {
  using Fwd = std::function<Tensor<double>(const Tensor<double>&)>;
  using Bwd =
      std::function<Tensor<double>(const Tensor<double>&, const Tensor<double>&)>;

  // Relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
  // maximized over the checked coordinates. `coords` empty means all.
  static double max_rel_error(const Fwd& fwd, const Bwd& bwd,
                              const Tensor<double>& point, double eps, Rng& rng,
                              const std::vector<std::int64_t>& coords = {}) {
    const Tensor<double> y0 = fwd(point);
    Tensor<double> u(y0.shape());
    for (std::int64_t i = 0; i < u.numel(); ++i) u[i] = rng.normal();

    const Tensor<double> analytic = bwd(point, u);
    if (!analytic.same_shape(point))
      throw ShapeError("grad_check: backward output shape mismatch");

    std::vector<std::int64_t> idx = coords;
    if (idx.empty()) {
      idx.resize(static_cast<std::size_t>(point.numel()));
      for (std::int64_t i = 0; i < point.numel(); ++i)
        idx[static_cast<std::size_t>(i)] = i;
    }

    Tensor<double> x = point;
    double worst = 0.0;
    for (const std::int64_t i : idx) {
      const double saved = x[i];
      x[i] = saved + eps;
      const double fp = project(fwd(x), u);
      x[i] = saved - eps;
      const double fm = project(fwd(x), u);
      x[i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i]))
        throw NumericError("grad_check: non-finite value at coordinate " +
                           std::to_string(i));
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
  }

 private:
  static double project(const Tensor<double>& y, const Tensor<double>& u) {
    double s = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) s += y[i] * u[i];
    return s;
  }
};

}  // namespace celldino
