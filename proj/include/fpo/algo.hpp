#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "fpo/adam.hpp"
#include "fpo/autodiff.hpp"
#include "fpo/policy.hpp"
#include "fpo/rollout.hpp"

namespace fpo {

struct FpoCfg {
  double eps_clip = 0.05;
  double ratio_log_clamp = 20.0;

  void validate() const {
    if (eps_clip <= 0.0) throw std::invalid_argument("fpo: eps_clip must be > 0");
    if (ratio_log_clamp <= 0.0) throw std::invalid_argument("fpo: ratio_log_clamp must be > 0");
  }
};

struct PpoGaussianCfg {
  double eps_clip = 0.2;
  double entropy_coef = 0.01;
  double ratio_log_clamp = 20.0;
};

struct DppoCfg {
  double eps_clip = 0.2;
  double sigma_t = 0.05;
  double ratio_log_clamp = 20.0;

  void validate() const {
    if (eps_clip <= 0.0) throw std::invalid_argument("dppo: eps_clip must be > 0");
    if (sigma_t <= 0.0) throw std::invalid_argument("dppo: sigma_t must be > 0");
  }
};

// Shared optimization knobs for one batch of updates.
struct UpdateCfg {
  int epochs = 4;
  int minibatches = 8;
  double value_coef = 0.25;
  double value_clip = 0.2;
  double max_grad_norm = 0.0;  // 0 disables
  AdvantageMode adv_mode = AdvantageMode::kZscore;
  double shift_floor = 0.0;
  bool debug_recompute_old = false;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("update: epochs must be >= 0");
    if (minibatches < 1) throw std::invalid_argument("update: minibatches must be >= 1");
  }
};

struct UpdateStats {
  double surrogate = 0.0;
  double value_loss = 0.0;
  double clip_fraction = 0.0;
  double mean_ratio = 1.0;
  double approx_kl = 0.0;
  double grad_norm = 0.0;
  int updates = 0;
};

// Probability-ratio proxy from matching-loss means: exp(old - new), with
// the log clamped before exponentiation. The clamp only bites far outside
// the clip region, where the surrogate is flat anyway.
inline double fpo_ratio(double loss_new_mean, double loss_old_mean, double log_clamp = 20.0) {
  if (!std::isfinite(loss_new_mean) || !std::isfinite(loss_old_mean)) {
    throw std::runtime_error("fpo_ratio: non-finite loss");
  }
  double d = loss_old_mean - loss_new_mean;
  d = std::clamp(d, -log_clamp, log_clamp);
  return std::exp(d);
}

// min(r * A, clip(r, 1 +/- eps) * A).
inline double clipped_surrogate(double ratio, double advantage, double eps_clip) {
  if (eps_clip <= 0.0) throw std::invalid_argument("clipped_surrogate: eps_clip must be > 0");
  const double clipped = std::clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip);
  return std::min(ratio * advantage, clipped * advantage);
}

namespace detail {

inline Matrix gather_rows(const std::vector<double>& flat, int cols, const std::vector<int>& rows) {
  Matrix out(static_cast<int>(rows.size()), cols);
  for (size_t r = 0; r < rows.size(); ++r) {
    const double* src = flat.data() + static_cast<size_t>(rows[r]) * cols;
    std::copy(src, src + cols, out.row_ptr(static_cast<int>(r)));
  }
  return out;
}

inline std::vector<double> gather(const std::vector<double>& flat, const std::vector<int>& rows) {
  std::vector<double> out(rows.size());
  for (size_t r = 0; r < rows.size(); ++r) out[r] = flat[rows[r]];
  return out;
}

// Value head shared by all three update rules: mean of
// max((v - R)^2, (v_old + clip(v - v_old) - R)^2) scaled by value_coef.
inline Tape::Ref value_loss_nodes(Tape& tape, const Mlp& value_net, const Mlp::Leaves& vlv,
                                  Tape::Ref obs, const std::vector<double>& returns,
                                  const std::vector<double>& old_values, const UpdateCfg& cfg) {
  Tape::Ref v = value_net.forward(tape, vlv, obs);
  Tape::Ref ret = tape.constant(Matrix::col_vector(returns));
  Tape::Ref err = tape.sub(v, ret);
  Tape::Ref sq = tape.mul(err, err);
  if (cfg.value_clip > 0.0) {
    Tape::Ref vold = tape.constant(Matrix::col_vector(old_values));
    Tape::Ref vclip = tape.add(vold, tape.clamp(tape.sub(v, vold), -cfg.value_clip, cfg.value_clip));
    Tape::Ref errc = tape.sub(vclip, ret);
    sq = tape.max_of(sq, tape.mul(errc, errc));
  }
  return tape.affine(tape.mean_all(sq), cfg.value_coef, 0.0);
}

// Clipped surrogate from a per-sample ratio node and constant advantages.
inline Tape::Ref surrogate_nodes(Tape& tape, Tape::Ref ratio, const std::vector<double>& adv,
                                 double eps_clip) {
  Matrix adv_col = Matrix::col_vector(adv);
  Tape::Ref unclipped = tape.scale_rows(ratio, adv_col);
  Tape::Ref clipped = tape.scale_rows(tape.clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip), adv_col);
  return tape.mean_all(tape.min_of(unclipped, clipped));
}

struct MinibatchPlan {
  std::vector<int> order;
  int minibatches;

  // Contiguous slices of the shuffled order, sizes differing by at most 1.
  std::vector<int> slice(int mb, int n) const {
    const int lo = static_cast<int>(static_cast<int64_t>(n) * mb / minibatches);
    const int hi = static_cast<int>(static_cast<int64_t>(n) * (mb + 1) / minibatches);
    return std::vector<int>(order.begin() + lo, order.begin() + hi);
  }
};

inline MinibatchPlan shuffled_plan(int n, int minibatches, Rng& rng) {
  MinibatchPlan plan;
  plan.minibatches = minibatches;
  plan.order.resize(n);
  std::iota(plan.order.begin(), plan.order.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.below(static_cast<uint64_t>(i) + 1));
    std::swap(plan.order[i], plan.order[j]);
  }
  return plan;
}

struct StatsAccum {
  UpdateStats sum;

  void add(const Tape& tape, Tape::Ref ratio, Tape::Ref srg, Tape::Ref vloss, double eps_clip,
           double grad_norm) {
    const Matrix& r = tape.value(ratio);
    double mr = 0.0, kl = 0.0, clipped = 0.0;
    for (double v : r.data) {
      mr += v;
      kl += (v - 1.0) - std::log(v);
      if (std::abs(v - 1.0) > eps_clip) clipped += 1.0;
    }
    const double n = static_cast<double>(r.size());
    sum.mean_ratio += mr / n;
    sum.approx_kl += kl / n;
    sum.clip_fraction += clipped / n;
    sum.surrogate += tape.value(srg).data[0];
    sum.value_loss += tape.value(vloss).data[0];
    sum.grad_norm += grad_norm;
    sum.updates += 1;
  }

  UpdateStats finish() const {
    UpdateStats s = sum;
    if (s.updates > 0) {
      const double inv = 1.0 / s.updates;
      s.surrogate *= inv;
      s.value_loss *= inv;
      s.clip_fraction *= inv;
      s.mean_ratio *= inv;
      s.approx_kl *= inv;
      s.grad_norm *= inv;
    }
    return s;
  }
};

// Runs backward, applies (optionally norm-clipped) Adam steps to both
// parameter sets, and returns the combined pre-clip gradient norm.
template <typename ExtractPolicyGrads>
double apply_step(Tape& tape, Tape::Ref loss, ExtractPolicyGrads&& extract_policy,
                  const Mlp& value_net, const Mlp::Leaves& vlv, ParamSet* policy_params,
                  AdamState* policy_adam, ParamSet* value_params, AdamState* value_adam,
                  const UpdateCfg& cfg) {
  tape.backward(loss);
  std::vector<double> pgrad(policy_params->values.size(), 0.0);
  extract_policy(&pgrad);
  std::vector<double> vgrad(value_params->values.size(), 0.0);
  value_net.accumulate_grads(tape, vlv, *value_params, &vgrad);

  const double norm = std::sqrt(std::pow(l2_norm(pgrad), 2) + std::pow(l2_norm(vgrad), 2));
  if (!std::isfinite(norm)) throw std::runtime_error("update: non-finite gradient");
  if (cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm) {
    const double s = cfg.max_grad_norm / norm;
    for (double& g : pgrad) g *= s;
    for (double& g : vgrad) g *= s;
  }
  adam_step(policy_params, pgrad, policy_adam);
  adam_step(value_params, vgrad, value_adam);
  return norm;
}

}  // namespace detail

// One batch of FPO updates: for every minibatch, recompute the per-sample
// mean matching loss on the stored (tau, eps) draws, form the ratio
// exp(stored_old - new), and ascend the clipped surrogate while the value
// head regresses the returns.
inline UpdateStats fpo_update(const RolloutBuffer& buf, const FlowPolicy& policy,
                              ParamSet* policy_params, AdamState* policy_adam, const Mlp& value_net,
                              ParamSet* value_params, AdamState* value_adam, const FpoCfg& fcfg,
                              const UpdateCfg& ucfg, Rng& shuffle_rng) {
  fcfg.validate();
  ucfg.validate();
  const int n = buf.n_transitions();
  const int n_mc = buf.n_mc;
  if (n_mc < 1) throw std::invalid_argument("fpo_update: buffer has no mc draws");

  // Per-sample mean of the logged losses; summation order matches the tape's
  // row_mean so the theta == theta_old ratio is exactly 1.
  std::vector<double> loss_old_mean(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int p = 0; p < n_mc; ++p) s += buf.mc_loss_old[static_cast<size_t>(i) * n_mc + p];
    loss_old_mean[i] = s * (1.0 / n_mc);
  }

  if (ucfg.debug_recompute_old) {
    Matrix obs_all(n, buf.obs_dim);
    obs_all.data = buf.obs;
    Matrix act_all(n, buf.act_dim);
    act_all.data = buf.actions;
    Matrix recomputed = policy.mc_loss_values(*policy_params, obs_all, act_all, buf.mc_tau.data(),
                                              buf.mc_eps.data(), n_mc);
    for (int i = 0; i < n; ++i) {
      if (recomputed.data[i] != loss_old_mean[i]) {
        throw std::runtime_error("fpo_update: stored losses do not match theta_old recomputation");
      }
    }
  }

  detail::StatsAccum acc;
  for (int epoch = 0; epoch < ucfg.epochs; ++epoch) {
    detail::MinibatchPlan plan = detail::shuffled_plan(n, ucfg.minibatches, shuffle_rng);
    for (int mb = 0; mb < ucfg.minibatches; ++mb) {
      const std::vector<int> rows = plan.slice(mb, n);
      if (rows.empty()) continue;
      const int m = static_cast<int>(rows.size());

      Matrix obs = detail::gather_rows(buf.obs, buf.obs_dim, rows);
      Matrix actions = detail::gather_rows(buf.actions, buf.act_dim, rows);
      std::vector<double> adv =
          normalize_advantages(detail::gather(buf.advantages, rows), ucfg.adv_mode, ucfg.shift_floor);
      std::vector<double> rets = detail::gather(buf.returns, rows);
      std::vector<double> vold = detail::gather(buf.values, rows);
      std::vector<double> lold = detail::gather(loss_old_mean, rows);
      Matrix taus = detail::gather_rows(buf.mc_tau, n_mc, rows);
      Matrix eps(m * n_mc, buf.act_dim);
      for (int r = 0; r < m; ++r) {
        const double* src = buf.mc_eps.data() + static_cast<size_t>(rows[r]) * n_mc * buf.act_dim;
        std::copy(src, src + static_cast<size_t>(n_mc) * buf.act_dim,
                  eps.row_ptr(r * n_mc));
      }

      Tape tape(true);
      Mlp::Leaves plv = policy.net().leaves(tape, *policy_params);
      FlowPolicy::McLossNodes nodes =
          policy.mc_loss_nodes(tape, plv, obs, actions, taus.data.data(), eps.data.data(), n_mc);
      Tape::Ref log_ratio = tape.clamp(
          tape.sub(tape.constant(Matrix::col_vector(lold)), nodes.per_sample),
          -fcfg.ratio_log_clamp, fcfg.ratio_log_clamp);
      Tape::Ref ratio = tape.exp_of(log_ratio);
      Tape::Ref srg = detail::surrogate_nodes(tape, ratio, adv, fcfg.eps_clip);

      Mlp::Leaves vlv = value_net.leaves(tape, *value_params);
      Tape::Ref vloss = detail::value_loss_nodes(tape, value_net, vlv, tape.constant(obs), rets, vold, ucfg);
      Tape::Ref loss = tape.add(tape.neg(srg), vloss);

      const double gn = detail::apply_step(
          tape, loss,
          [&](std::vector<double>* g) { policy.net().accumulate_grads(tape, plv, *policy_params, g); },
          value_net, vlv, policy_params, policy_adam, value_params, value_adam, ucfg);
      acc.add(tape, ratio, srg, vloss, fcfg.eps_clip, gn);
    }
  }
  return acc.finish();
}

// Standard PPO-clip on exact Gaussian likelihood ratios with an entropy
// bonus.
inline UpdateStats ppo_gaussian_update(const RolloutBuffer& buf, const GaussianPolicy& policy,
                                       ParamSet* policy_params, AdamState* policy_adam,
                                       const Mlp& value_net, ParamSet* value_params,
                                       AdamState* value_adam, const PpoGaussianCfg& gcfg,
                                       const UpdateCfg& ucfg, Rng& shuffle_rng) {
  ucfg.validate();
  if (gcfg.eps_clip <= 0.0) throw std::invalid_argument("ppo: eps_clip must be > 0");
  const int n = buf.n_transitions();

  detail::StatsAccum acc;
  for (int epoch = 0; epoch < ucfg.epochs; ++epoch) {
    detail::MinibatchPlan plan = detail::shuffled_plan(n, ucfg.minibatches, shuffle_rng);
    for (int mb = 0; mb < ucfg.minibatches; ++mb) {
      const std::vector<int> rows = plan.slice(mb, n);
      if (rows.empty()) continue;

      Matrix obs = detail::gather_rows(buf.obs, buf.obs_dim, rows);
      Matrix actions = detail::gather_rows(buf.actions, buf.act_dim, rows);
      std::vector<double> adv =
          normalize_advantages(detail::gather(buf.advantages, rows), ucfg.adv_mode, ucfg.shift_floor);
      std::vector<double> rets = detail::gather(buf.returns, rows);
      std::vector<double> vold = detail::gather(buf.values, rows);
      std::vector<double> lpold = detail::gather(buf.logp_old, rows);

      Tape tape(true);
      GaussianPolicy::Leaves plv = policy.leaves(tape, *policy_params);
      Tape::Ref logp = policy.logp_nodes(tape, plv, obs, actions);
      Tape::Ref log_ratio =
          tape.clamp(tape.sub(logp, tape.constant(Matrix::col_vector(lpold))),
                     -gcfg.ratio_log_clamp, gcfg.ratio_log_clamp);
      Tape::Ref ratio = tape.exp_of(log_ratio);
      Tape::Ref srg = detail::surrogate_nodes(tape, ratio, adv, gcfg.eps_clip);
      Tape::Ref entropy = policy.entropy_node(tape, plv);

      Mlp::Leaves vlv = value_net.leaves(tape, *value_params);
      Tape::Ref vloss = detail::value_loss_nodes(tape, value_net, vlv, tape.constant(obs), rets, vold, ucfg);
      Tape::Ref loss =
          tape.add(tape.add(tape.neg(srg), vloss), tape.affine(entropy, -gcfg.entropy_coef, 0.0));

      const double gn = detail::apply_step(
          tape, loss,
          [&](std::vector<double>* g) {
            policy.net().accumulate_grads(tape, plv.net, *policy_params, g);
            Mlp::add_segment_grad(tape, plv.log_std, policy_params->segment(policy.log_std_segment()), g);
          },
          value_net, vlv, policy_params, policy_adam, value_params, value_adam, ucfg);
      acc.add(tape, ratio, srg, vloss, gcfg.eps_clip, gn);
    }
  }
  return acc.finish();
}

// Denoising-MDP baseline: every stochastic denoising step is scored as a
// Gaussian sub-action around the deterministic step mean; the clipped
// surrogate acts on the whole-path likelihood ratio, with the environment
// advantage broadcast to the path.
inline UpdateStats dppo_update(const RolloutBuffer& buf, const FlowPolicy& policy,
                               ParamSet* policy_params, AdamState* policy_adam, const Mlp& value_net,
                               ParamSet* value_params, AdamState* value_adam, const DppoCfg& dcfg,
                               const UpdateCfg& ucfg, Rng& shuffle_rng) {
  dcfg.validate();
  ucfg.validate();
  const int n = buf.n_transitions();
  const int k_steps = buf.n_denoise;
  if (k_steps < 1) throw std::invalid_argument("dppo_update: buffer has no denoising paths");

  detail::StatsAccum acc;
  for (int epoch = 0; epoch < ucfg.epochs; ++epoch) {
    detail::MinibatchPlan plan = detail::shuffled_plan(n, ucfg.minibatches, shuffle_rng);
    for (int mb = 0; mb < ucfg.minibatches; ++mb) {
      const std::vector<int> rows = plan.slice(mb, n);
      if (rows.empty()) continue;
      const int m = static_cast<int>(rows.size());

      Matrix obs = detail::gather_rows(buf.obs, buf.obs_dim, rows);
      std::vector<double> adv =
          normalize_advantages(detail::gather(buf.advantages, rows), ucfg.adv_mode, ucfg.shift_floor);
      std::vector<double> rets = detail::gather(buf.returns, rows);
      std::vector<double> vold = detail::gather(buf.values, rows);
      std::vector<double> lpold = detail::gather(buf.path_logp_old, rows);

      std::vector<Matrix> states(k_steps + 1, Matrix(m, buf.act_dim));
      const size_t stride = static_cast<size_t>(k_steps + 1) * buf.act_dim;
      for (int r = 0; r < m; ++r) {
        const double* base = buf.path_states.data() + rows[r] * stride;
        for (int k = 0; k <= k_steps; ++k) {
          std::copy(base + static_cast<size_t>(k) * buf.act_dim,
                    base + static_cast<size_t>(k + 1) * buf.act_dim, states[k].row_ptr(r));
        }
      }

      Tape tape(true);
      Mlp::Leaves plv = policy.net().leaves(tape, *policy_params);
      Tape::Ref logp = policy.path_logp_nodes(tape, plv, obs, states, dcfg.sigma_t);
      Tape::Ref log_ratio =
          tape.clamp(tape.sub(logp, tape.constant(Matrix::col_vector(lpold))),
                     -dcfg.ratio_log_clamp, dcfg.ratio_log_clamp);
      Tape::Ref ratio = tape.exp_of(log_ratio);
      Tape::Ref srg = detail::surrogate_nodes(tape, ratio, adv, dcfg.eps_clip);

      Mlp::Leaves vlv = value_net.leaves(tape, *value_params);
      Tape::Ref vloss = detail::value_loss_nodes(tape, value_net, vlv, tape.constant(obs), rets, vold, ucfg);
      Tape::Ref loss = tape.add(tape.neg(srg), vloss);

      const double gn = detail::apply_step(
          tape, loss,
          [&](std::vector<double>* g) { policy.net().accumulate_grads(tape, plv, *policy_params, g); },
          value_net, vlv, policy_params, policy_adam, value_params, value_adam, ucfg);
      acc.add(tape, ratio, srg, vloss, dcfg.eps_clip, gn);
    }
  }
  return acc.finish();
}

}  // namespace fpo
