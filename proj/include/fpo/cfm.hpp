#pragma once

#include <stdexcept>
#include <vector>

#include "fpo/rng.hpp"
#include "fpo/schedule.hpp"
#include "fpo/tensor.hpp"

namespace fpo {

// Loss parameterization for the per-draw matching loss: residual on the
// implied noise estimate, or directly on the velocity estimate.
enum class McParam { kEpsMse, kUMse };

inline const char* mc_param_name(McParam p) { return p == McParam::kEpsMse ? "eps_mse" : "u_mse"; }

inline McParam mc_param_from_name(const std::string& s) {
  if (s == "eps_mse") return McParam::kEpsMse;
  if (s == "u_mse") return McParam::kUMse;
  throw std::invalid_argument("unknown mc_param: " + s);
}

// One logged (tau, eps) draw. tau is sampled uniformly on the clamped
// support; eps is i.i.d. standard normal in the action dimension.
struct CfmSample {
  double tau = 0.5;
  std::vector<double> eps;

  static CfmSample draw(const Schedule& schedule, int dim, Rng& rng) {
    CfmSample s;
    s.tau = schedule.sample_tau(rng);
    s.eps.resize(dim);
    for (double& e : s.eps) e = rng.normal();
    return s;
  }
};

// x_tau = alpha * a + sigma * eps. Valid on the closed interval [0, 1].
inline std::vector<double> perturb(const std::vector<double>& a, const CfmSample& sample,
                                   const Schedule& schedule) {
  if (a.size() != sample.eps.size()) throw std::invalid_argument("perturb: dimension mismatch");
  double alpha = 0.0, sigma = 0.0;
  schedule.alpha_sigma(sample.tau, &alpha, &sigma);
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = alpha * a[i] + sigma * sample.eps[i];
  return out;
}

// Velocity-residual loss: || v_hat - (a - eps) ||^2.
inline double cfm_loss_u(const std::vector<double>& v_hat, const std::vector<double>& a,
                         const std::vector<double>& eps) {
  if (v_hat.size() != a.size() || a.size() != eps.size()) {
    throw std::invalid_argument("cfm_loss_u: dimension mismatch");
  }
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double r = v_hat[i] - (a[i] - eps[i]);
    s += r * r;
  }
  return s;
}

// Scale applied to ||eps_hat - eps||^2 in the weighted noise-residual loss:
// (1/2) * w(lambda) * |dlambda/dtau|.
inline double eps_loss_scale(const Schedule& schedule, const Weighting& weighting, double tau) {
  const SchedulePoint p = schedule.eval(tau);
  return 0.5 * weighting.eval(p.lambda) * p.dlambda;
}

// Noise-residual loss. eps_hat is recovered from the velocity estimate by
// inverting the interpolation path at tau:
//   eps_hat = cv * v_hat + cx * x_tau   (ot_linear: eps_hat = x_tau - tau * v_hat)
// then scaled by (1/2) w(lambda) |dlambda/dtau|.
inline double cfm_loss_eps(const std::vector<double>& v_hat, const std::vector<double>& a,
                           const std::vector<double>& eps, double tau, const Schedule& schedule,
                           const Weighting& weighting) {
  if (v_hat.size() != a.size() || a.size() != eps.size()) {
    throw std::invalid_argument("cfm_loss_eps: dimension mismatch");
  }
  if (tau < schedule.tau_min || tau > 1.0 - schedule.tau_min) {
    throw std::domain_error("cfm_loss_eps: tau outside the clamped range");
  }
  const SchedulePoint p = schedule.eval(tau);
  double cv = 0.0, cx = 0.0;
  schedule.eps_hat_coeffs(p, &cv, &cx);
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double x = p.alpha * a[i] + p.sigma * eps[i];
    const double r = (cv * v_hat[i] + cx * x) - eps[i];
    s += r * r;
  }
  return 0.5 * weighting.eval(p.lambda) * p.dlambda * s;
}

}  // namespace fpo
