#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fpo/mlp.hpp"

namespace fpo {

// Adam with the standard bias correction. Moment vectors match the
// parameter vector length; the step counter lives on the ParamSet.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(size_t n, double learning_rate) : m(n, 0.0), v(n, 0.0), lr(learning_rate) {}
};

// One update in place. Throws on non-finite gradients without touching
// parameters or moments.
inline void adam_step(ParamSet* params, const std::vector<double>& grad, AdamState* state) {
  if (grad.size() != params->values.size()) throw std::invalid_argument("adam_step: gradient length mismatch");
  if (state->m.size() != grad.size() || state->v.size() != grad.size()) {
    throw std::invalid_argument("adam_step: moment length mismatch");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw std::runtime_error("adam_step: non-finite gradient");
  }
  params->step += 1;
  const double t = static_cast<double>(params->step);
  const double c1 = 1.0 - std::pow(state->beta1, t);
  const double c2 = 1.0 - std::pow(state->beta2, t);
  for (size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    state->m[i] = state->beta1 * state->m[i] + (1.0 - state->beta1) * g;
    state->v[i] = state->beta2 * state->v[i] + (1.0 - state->beta2) * g * g;
    const double mhat = state->m[i] / c1;
    const double vhat = state->v[i] / c2;
    params->values[i] -= state->lr * mhat / (std::sqrt(vhat) + state->eps);
  }
}

// Scales the gradient so its L2 norm is at most max_norm (no-op when
// max_norm <= 0). Returns the pre-clip norm.
inline double clip_grad_norm(std::vector<double>* grad, double max_norm) {
  double norm = l2_norm(*grad);
  if (max_norm > 0.0 && norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (double& g : *grad) g *= s;
  }
  return norm;
}

}  // namespace fpo
