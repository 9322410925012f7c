#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "fpo/rng.hpp"

namespace fpo {

enum class ScheduleKind { kOtLinear, kVpCosine };
enum class WeightingKind { kUniform, kExpHalfNegLambda };

inline const char* schedule_name(ScheduleKind k) {
  return k == ScheduleKind::kOtLinear ? "ot_linear" : "vp_cosine";
}

inline ScheduleKind schedule_from_name(const std::string& s) {
  if (s == "ot_linear") return ScheduleKind::kOtLinear;
  if (s == "vp_cosine") return ScheduleKind::kVpCosine;
  throw std::invalid_argument("unknown schedule: " + s);
}

inline const char* weighting_name(WeightingKind k) {
  return k == WeightingKind::kUniform ? "uniform" : "exp_half_neg_lambda";
}

inline WeightingKind weighting_from_name(const std::string& s) {
  if (s == "uniform") return WeightingKind::kUniform;
  if (s == "exp_half_neg_lambda") return WeightingKind::kExpHalfNegLambda;
  throw std::invalid_argument("unknown mc_weighting: " + s);
}

// Pointwise schedule quantities at flow time tau. The path runs from pure
// noise at tau=0 (alpha=0, sigma=1) to clean data at tau=1 (alpha=1,
// sigma=0). lambda = log(alpha^2 / sigma^2) is the log signal-to-noise
// ratio, strictly increasing in tau; it diverges at the endpoints, hence
// the clamp on any tau that feeds it.
struct SchedulePoint {
  double alpha = 0.0;
  double sigma = 0.0;
  double dalpha = 0.0;   // d(alpha)/d(tau)
  double dsigma = 0.0;   // d(sigma)/d(tau)
  double lambda = 0.0;
  double dlambda = 0.0;  // d(lambda)/d(tau), positive on (0, 1)
};

struct Schedule {
  ScheduleKind kind = ScheduleKind::kOtLinear;
  double tau_min = 0.05;

  double clamp_tau(double tau) const {
    const double hi = 1.0 - tau_min;
    return tau < tau_min ? tau_min : (tau > hi ? hi : tau);
  }

  // Interpolation coefficients only; valid on the closed interval [0, 1].
  void alpha_sigma(double tau, double* alpha, double* sigma) const {
    if (kind == ScheduleKind::kOtLinear) {
      *alpha = tau;
      *sigma = 1.0 - tau;
    } else {
      const double u = 1.5707963267948966 * tau;
      *alpha = std::sin(u);
      *sigma = std::cos(u);
    }
  }

  // Full evaluation including lambda; requires tau strictly inside (0, 1).
  SchedulePoint eval(double tau) const {
    if (!(tau > 0.0 && tau < 1.0)) {
      throw std::domain_error("schedule eval: tau must lie strictly inside (0, 1); clamp first");
    }
    SchedulePoint p;
    if (kind == ScheduleKind::kOtLinear) {
      p.alpha = tau;
      p.sigma = 1.0 - tau;
      p.dalpha = 1.0;
      p.dsigma = -1.0;
      p.dlambda = 2.0 / (tau * (1.0 - tau));
    } else {
      const double half_pi = 1.5707963267948966;
      const double u = half_pi * tau;
      p.alpha = std::sin(u);
      p.sigma = std::cos(u);
      p.dalpha = half_pi * std::cos(u);
      p.dsigma = -half_pi * std::sin(u);
      // 2 * d/dtau log tan(pi tau / 2) = 2 pi / sin(pi tau)
      p.dlambda = 2.0 * 3.141592653589793 / std::sin(3.141592653589793 * tau);
    }
    p.lambda = 2.0 * (std::log(p.alpha) - std::log(p.sigma));
    return p;
  }

  // Coefficients of the implied noise estimate: eps_hat = cv * v_hat + cx * x_tau,
  // obtained by inverting [x = alpha a + sigma e, v = alpha' a + sigma' e].
  void eps_hat_coeffs(const SchedulePoint& p, double* cv, double* cx) const {
    const double det = p.alpha * p.dsigma - p.dalpha * p.sigma;
    *cv = p.alpha / det;
    *cx = -p.dalpha / det;
  }

  // Uniform draw over the clamped support [tau_min, 1 - tau_min].
  double sample_tau(Rng& rng) const { return rng.uniform(tau_min, 1.0 - tau_min); }
};

struct Weighting {
  WeightingKind kind = WeightingKind::kUniform;

  double eval(double lambda) const {
    if (!std::isfinite(lambda)) throw std::domain_error("weighting eval: non-finite lambda");
    return kind == WeightingKind::kUniform ? 1.0 : std::exp(-0.5 * lambda);
  }
};

}  // namespace fpo
