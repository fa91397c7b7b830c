#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fedfap/tensor.hpp"

namespace fedfap::nn {

enum class OptKind { sgd, adam };

struct OptimizerConfig {
  OptKind kind = OptKind::sgd;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (learning_rate <= 0.0)
      throw std::invalid_argument("OptimizerConfig: learning_rate must be > 0");
    if (kind == OptKind::adam &&
        (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0))
      throw std::invalid_argument("OptimizerConfig: betas must be in [0,1)");
  }
};

// Per-parameter-list state; slot order must match the list passed to step().
struct OptimizerState {
  long t = 0;
  std::vector<std::vector<double>> m, v;
};

inline void zero_grads(const std::vector<Tensor*>& params) {
  for (Tensor* p : params) p->zero_grad();
}

// SGD: w <- w - lr*g. Adam: bias-corrected moment update.
inline void optimizer_step(const std::vector<Tensor*>& params,
                           const OptimizerConfig& cfg, OptimizerState& state) {
  cfg.validate();
  for (const Tensor* p : params)
    if (!p->has_grad())
      throw std::runtime_error("optimizer_step: missing gradient");

  if (cfg.kind == OptKind::sgd) {
    for (Tensor* p : params)
      for (std::size_t i = 0; i < p->data.size(); ++i)
        p->data[i] -= cfg.learning_rate * p->grad[i];
    return;
  }

  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t j = 0; j < params.size(); ++j) {
      state.m[j].assign(params[j]->data.size(), 0.0);
      state.v[j].assign(params[j]->data.size(), 0.0);
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t j = 0; j < params.size(); ++j) {
    Tensor* p = params[j];
    if (state.m[j].size() != p->data.size())
      throw std::runtime_error("optimizer_step: state/parameter shape mismatch");
    auto& m = state.m[j];
    auto& v = state.v[j];
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const double g = p->grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p->data[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

}  // namespace fedfap::nn
