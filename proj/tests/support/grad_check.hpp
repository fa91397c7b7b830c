#pragma once

// Independent central-finite-difference gradient oracle. Lives in test code
// only; never included from include/fedfap.

#include <cmath>
#include <functional>
#include <vector>

#include "fedfap/tensor.hpp"

namespace fedfap::testing {

// loss_fn must be a pure function of the parameter vectors it is given:
// callers re-seed any stochastic state (dropout masks, batchnorm buffers)
// inside the closure so repeated evaluations see identical randomness.
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

inline double rel_err(double analytic, double numeric) {
  const double denom =
      std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
  return std::fabs(analytic - numeric) / denom;
}

// Central differences with step h over every coordinate of every tensor in
// `params`. `analytic` holds dL/dtheta in matching order.
inline GradCheckResult central_difference_check(
    std::vector<fedfap::nn::Tensor*> params,
    const std::vector<std::vector<double>>& analytic,
    const std::function<double()>& loss_fn, double h = 1e-5) {
  GradCheckResult res;
  for (std::size_t j = 0; j < params.size(); ++j) {
    auto& data = params[j]->data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn();
      data[i] = saved - h;
      const double down = loss_fn();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[j][i], numeric));
      res.checked += 1;
    }
  }
  return res;
}

}  // namespace fedfap::testing
