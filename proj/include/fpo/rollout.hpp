#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpo/tensor.hpp"

namespace fpo {

struct GaeCfg {
  double gamma = 0.995;
  double lambda = 0.95;
  double reward_scale = 1.0;

  void validate() const {
    if (gamma < 0.0 || gamma > 1.0) throw std::invalid_argument("gae: gamma outside [0, 1]");
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("gae: lambda outside [0, 1]");
  }
};

// Single-episode-stream GAE. dones mark true terminations: the recursion
// resets across them and the post-done value never leaks backwards.
// bootstrap is v(o_T) for a non-terminal tail.
inline void compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                        const std::vector<uint8_t>& dones, double bootstrap, const GaeCfg& cfg,
                        std::vector<double>* advantages, std::vector<double>* returns) {
  cfg.validate();
  const size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw std::invalid_argument("compute_gae: length mismatch");
  advantages->assign(n, 0.0);
  returns->assign(n, 0.0);
  double running = 0.0;
  for (size_t i = n; i-- > 0;) {
    const double nonterminal = dones[i] ? 0.0 : 1.0;
    const double v_next = (i + 1 == n) ? bootstrap : values[i + 1];
    const double delta = rewards[i] + cfg.gamma * v_next * nonterminal - values[i];
    running = delta + cfg.gamma * cfg.lambda * nonterminal * running;
    (*advantages)[i] = running;
    (*returns)[i] = running + values[i];
  }
  for (double a : *advantages) {
    if (!std::isfinite(a)) throw std::runtime_error("compute_gae: non-finite advantage");
  }
}

enum class AdvantageMode { kZscore, kShiftPositive, kNone };

inline const char* advantage_mode_name(AdvantageMode m) {
  switch (m) {
    case AdvantageMode::kZscore: return "zscore";
    case AdvantageMode::kShiftPositive: return "shift_positive";
    default: return "none";
  }
}

inline AdvantageMode advantage_mode_from_name(const std::string& s) {
  if (s == "zscore") return AdvantageMode::kZscore;
  if (s == "shift_positive") return AdvantageMode::kShiftPositive;
  if (s == "none") return AdvantageMode::kNone;
  throw std::invalid_argument("unknown advantage mode: " + s);
}

// zscore: mean 0, std 1 (std floored at 1e-8, so constant batches map to
// zeros). shift_positive: minimum mapped to the floor. none: identity.
inline std::vector<double> normalize_advantages(const std::vector<double>& adv, AdvantageMode mode,
                                                double shift_floor = 0.0) {
  if (adv.empty()) throw std::invalid_argument("normalize_advantages: empty batch");
  std::vector<double> out = adv;
  switch (mode) {
    case AdvantageMode::kNone:
      break;
    case AdvantageMode::kZscore: {
      double mean = 0.0;
      for (double a : adv) mean += a;
      mean /= adv.size();
      double var = 0.0;
      for (double a : adv) var += (a - mean) * (a - mean);
      var /= adv.size();
      const double std_floor = 1e-8;
      const double inv = 1.0 / std::max(std::sqrt(var), std_floor);
      for (double& a : out) a = (a - mean) * inv;
      break;
    }
    case AdvantageMode::kShiftPositive: {
      if (shift_floor < 0.0) throw std::invalid_argument("normalize_advantages: floor must be >= 0");
      const double lo = *std::min_element(adv.begin(), adv.end());
      for (double& a : out) a = a - lo + shift_floor;
      break;
    }
  }
  return out;
}

// Welford accumulators for online observation normalization.
class RunningNorm {
 public:
  explicit RunningNorm(int dim = 0) { reset(dim); }

  void reset(int dim) {
    dim_ = dim;
    count_ = 0;
    mean_.assign(dim, 0.0);
    m2_.assign(dim, 0.0);
  }

  int dim() const { return dim_; }
  int64_t count() const { return count_; }
  const std::vector<double>& mean() const { return mean_; }

  std::vector<double> variance() const {
    std::vector<double> v(dim_, 1.0);
    if (count_ >= 2) {
      for (int i = 0; i < dim_; ++i) v[i] = m2_[i] / count_;
    }
    return v;
  }

  void update(std::span<const double> x) {
    if (static_cast<int>(x.size()) != dim_) throw std::invalid_argument("RunningNorm: dim mismatch");
    count_ += 1;
    for (int i = 0; i < dim_; ++i) {
      const double d = x[i] - mean_[i];
      mean_[i] += d / count_;
      m2_[i] += d * (x[i] - mean_[i]);
    }
  }

  void update_batch(const Matrix& rows) {
    for (int r = 0; r < rows.rows; ++r) update(std::span<const double>(rows.row_ptr(r), rows.cols));
  }

  // (x - mean) / sqrt(var + 1e-8), clipped to +/-10. A fresh accumulator is
  // an identity passthrough (mean 0, var 1).
  void normalize(std::span<const double> x, std::span<double> out) const {
    const std::vector<double> var = variance();
    for (int i = 0; i < dim_; ++i) {
      double z = (x[i] - (count_ >= 1 ? mean_[i] : 0.0)) / std::sqrt(var[i] + 1e-8);
      if (z > 10.0) z = 10.0;
      if (z < -10.0) z = -10.0;
      out[i] = z;
    }
  }

  std::vector<double> normalize(const std::vector<double>& x) const {
    std::vector<double> out(dim_);
    normalize(std::span<const double>(x.data(), x.size()), std::span<double>(out.data(), out.size()));
    return out;
  }

  // Raw accumulator access for checkpointing.
  void load(int64_t count, std::vector<double> mean, std::vector<double> m2) {
    count_ = count;
    mean_ = std::move(mean);
    m2_ = std::move(m2);
    dim_ = static_cast<int>(mean_.size());
  }
  const std::vector<double>& m2() const { return m2_; }

 private:
  int dim_ = 0;
  int64_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

// Clipped value objective (plain-number version; the tape version in the
// update rules mirrors it). Mean over the batch of
// max((v - R)^2, (v_old + clip(v - v_old) - R)^2) * coef.
inline double value_loss(const std::vector<double>& values_pred, const std::vector<double>& returns,
                         const std::vector<double>& old_values, double clip_coef, double value_coef) {
  const size_t n = values_pred.size();
  if (returns.size() != n || old_values.size() != n) throw std::invalid_argument("value_loss: length mismatch");
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double e = values_pred[i] - returns[i];
    double loss = e * e;
    if (clip_coef > 0.0) {
      double d = values_pred[i] - old_values[i];
      d = std::clamp(d, -clip_coef, clip_coef);
      const double ec = old_values[i] + d - returns[i];
      loss = std::max(loss, ec * ec);
    }
    s += loss;
  }
  return value_coef * s / static_cast<double>(n);
}

// Per-transition storage for one collected batch, env-major
// (index = env * unroll + t). Algorithm-specific fields are sized on
// demand.
struct RolloutBuffer {
  int num_envs = 0;
  int unroll = 0;
  int obs_dim = 0;
  int act_dim = 0;
  int n_mc = 0;
  int n_denoise = 0;

  std::vector<double> obs;              // n x obs_dim (normalized at collection time)
  std::vector<double> actions;          // n x act_dim
  std::vector<double> rewards;          // n (already reward-scaled)
  std::vector<double> values;           // n
  std::vector<double> next_values;      // n: v(o_{t+1}) pre-reset (bootstrap source)
  std::vector<uint8_t> terminated;      // n
  std::vector<uint8_t> truncated;       // n

  // Flow-policy MC draws.
  std::vector<double> mc_tau;           // n x n_mc
  std::vector<double> mc_eps;           // n x n_mc x act_dim
  std::vector<double> mc_loss_old;      // n x n_mc

  // Gaussian policy.
  std::vector<double> logp_old;         // n

  // Denoising-path storage (stochastic sampler rollouts).
  std::vector<double> path_states;      // n x (n_denoise + 1) x act_dim
  std::vector<double> path_means;       // n x n_denoise x act_dim
  std::vector<double> path_logp_old;    // n

  std::vector<double> advantages;       // n
  std::vector<double> returns;          // n

  int n_transitions() const { return num_envs * unroll; }

  void allocate(int envs, int steps, int od, int ad, int mc, int denoise) {
    num_envs = envs;
    unroll = steps;
    obs_dim = od;
    act_dim = ad;
    n_mc = mc;
    n_denoise = denoise;
    const size_t n = static_cast<size_t>(envs) * steps;
    obs.assign(n * od, 0.0);
    actions.assign(n * ad, 0.0);
    rewards.assign(n, 0.0);
    values.assign(n, 0.0);
    next_values.assign(n, 0.0);
    terminated.assign(n, 0);
    truncated.assign(n, 0);
    if (mc > 0) {
      mc_tau.assign(n * mc, 0.0);
      mc_eps.assign(n * mc * ad, 0.0);
      mc_loss_old.assign(n * mc, 0.0);
    }
    logp_old.assign(n, 0.0);
    if (denoise > 0) {
      path_states.assign(n * (denoise + 1) * ad, 0.0);
      path_means.assign(n * denoise * ad, 0.0);
      path_logp_old.assign(n, 0.0);
    }
    advantages.assign(n, 0.0);
    returns.assign(n, 0.0);
  }

  // GAE over each env row. Truncated steps bootstrap from the stored
  // pre-reset next value; terminated steps reset the chain with no
  // bootstrap.
  void compute_advantages(const GaeCfg& cfg) {
    cfg.validate();
    for (int e = 0; e < num_envs; ++e) {
      double running = 0.0;
      for (int t = unroll - 1; t >= 0; --t) {
        const int i = e * unroll + t;
        const double nonterminal = terminated[i] ? 0.0 : 1.0;
        const double chain = (terminated[i] || truncated[i]) ? 0.0 : 1.0;
        const double delta = rewards[i] + cfg.gamma * next_values[i] * nonterminal - values[i];
        running = delta + cfg.gamma * cfg.lambda * chain * running;
        advantages[i] = running;
        returns[i] = running + values[i];
      }
    }
    for (double a : advantages) {
      if (!std::isfinite(a)) throw std::runtime_error("rollout: non-finite advantage");
    }
  }
};

}  // namespace fpo
