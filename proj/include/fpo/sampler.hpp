#pragma once

#include <functional>
#include <stdexcept>
#include <string>

#include "fpo/rng.hpp"
#include "fpo/tensor.hpp"

namespace fpo {

enum class SamplerMethod { kEuler, kHeun, kStochasticEuler };

inline const char* sampler_name(SamplerMethod m) {
  switch (m) {
    case SamplerMethod::kEuler: return "euler";
    case SamplerMethod::kHeun: return "heun";
    default: return "stochastic_euler";
  }
}

inline SamplerMethod sampler_from_name(const std::string& s) {
  if (s == "euler") return SamplerMethod::kEuler;
  if (s == "heun") return SamplerMethod::kHeun;
  if (s == "stochastic_euler") return SamplerMethod::kStochasticEuler;
  throw std::invalid_argument("unknown sampler method: " + s);
}

struct SamplerCfg {
  SamplerMethod method = SamplerMethod::kEuler;
  int n_steps = 10;
  double churn_std = 0.05;  // stochastic_euler only

  void validate() const {
    if (n_steps < 1) throw std::invalid_argument("sampler: n_steps must be >= 1");
    if (churn_std < 0.0) throw std::invalid_argument("sampler: churn_std must be >= 0");
  }
};

// Integrates dx/dtau = field(x, tau) from tau=0 to tau=1 over a batch of
// rows. The field is a black box; euler and heun are deterministic given
// the start state, stochastic_euler perturbs every step with N(0, churn^2)
// noise drawn per row from per-row streams, and each later step simply
// proceeds from the perturbed state.
//
// observer(step_index, tau_after_step, state) is invoked after each step
// (and once for the initial state at tau=0) when provided.
template <typename Field>
Matrix integrate(Field&& field, const Matrix& x0, const SamplerCfg& cfg, Rng* row_rngs,
                 const std::function<void(int, double, const Matrix&)>& observer = nullptr) {
  cfg.validate();
  const int n = cfg.n_steps;
  const double h = 1.0 / n;
  Matrix x = x0;
  if (observer) observer(0, 0.0, x);
  for (int k = 0; k < n; ++k) {
    const double tau = static_cast<double>(k) / n;
    Matrix v = field(x, tau);
    if (v.rows != x.rows || v.cols != x.cols) throw std::runtime_error("integrate: field shape mismatch");
    switch (cfg.method) {
      case SamplerMethod::kEuler: {
        for (int i = 0; i < x.size(); ++i) x.data[i] += h * v.data[i];
        break;
      }
      case SamplerMethod::kHeun: {
        Matrix mid = x;
        for (int i = 0; i < x.size(); ++i) mid.data[i] += h * v.data[i];
        Matrix v2 = field(mid, static_cast<double>(k + 1) / n);
        for (int i = 0; i < x.size(); ++i) x.data[i] += 0.5 * h * (v.data[i] + v2.data[i]);
        break;
      }
      case SamplerMethod::kStochasticEuler: {
        if (row_rngs == nullptr) throw std::invalid_argument("integrate: stochastic sampler needs rng streams");
        for (int i = 0; i < x.rows; ++i) {
          double* xr = x.row_ptr(i);
          const double* vr = v.row_ptr(i);
          for (int j = 0; j < x.cols; ++j) {
            xr[j] += h * vr[j] + cfg.churn_std * row_rngs[i].normal();
          }
        }
        break;
      }
    }
    for (int i = 0; i < x.size(); ++i) {
      if (!std::isfinite(x.data[i])) {
        throw std::runtime_error("integrate: non-finite state after step " + std::to_string(k + 1));
      }
    }
    if (observer) observer(k + 1, static_cast<double>(k + 1) / n, x);
  }
  return x;
}

// Single-row convenience wrapper over vectors.
template <typename Field>
std::vector<double> integrate_vec(Field&& field, const std::vector<double>& x0, const SamplerCfg& cfg,
                                  Rng* rng) {
  Matrix m = Matrix::row_vector(x0);
  auto wrapped = [&](const Matrix& x, double tau) {
    std::vector<double> row(x.data.begin(), x.data.end());
    return Matrix::row_vector(field(row, tau));
  };
  Matrix out = integrate(wrapped, m, cfg, rng);
  return out.data;
}

}  // namespace fpo
