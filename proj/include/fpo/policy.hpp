#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "fpo/adam.hpp"
#include "fpo/autodiff.hpp"
#include "fpo/cfm.hpp"
#include "fpo/mlp.hpp"
#include "fpo/rng.hpp"
#include "fpo/sampler.hpp"
#include "fpo/schedule.hpp"
#include "fpo/tensor.hpp"

namespace fpo {

// Sinusoidal features of the flow time, frequencies 2^k cycles over [0, 1].
struct TimeEmbed {
  int dim = 8;

  void eval(double tau, double* out) const {
    const double two_pi = 6.283185307179586;
    for (int k = 0; k < dim / 2; ++k) {
      const double a = two_pi * std::ldexp(1.0, k) * tau;
      out[2 * k] = std::sin(a);
      out[2 * k + 1] = std::cos(a);
    }
  }

  void validate() const {
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("time_embed_dim must be positive and even");
  }
};

struct FlowPolicyCfg {
  std::vector<int> hidden{32, 32};
  Activation activation = Activation::kTanh;
  int time_embed_dim = 8;
  int n_mc = 8;
  Schedule schedule;
  Weighting weighting;
  McParam mc_param = McParam::kEpsMse;
  SamplerCfg sampler;

  void validate() const {
    if (n_mc < 1) throw std::invalid_argument("n_mc must be >= 1");
    TimeEmbed{time_embed_dim}.validate();
    sampler.validate();
  }
};

// Everything produced by sampling a batch of actions from the flow policy:
// the executed actions, the noise draws that seeded them, the logged
// (tau, eps, loss) triples, and (optionally) the full denoising path for
// samplers that perturb each step.
struct FlowSampleBatch {
  Matrix actions;        // E x act
  Matrix noise_init;     // E x act
  Matrix mc_tau;         // E x n_mc
  Matrix mc_eps;         // (E * n_mc) x act
  Matrix mc_loss_old;    // E x n_mc
  std::vector<Matrix> path_states;  // n_steps + 1 entries of E x act
  std::vector<Matrix> path_means;   // n_steps entries of E x act
  Matrix path_logp_old;  // E x 1
};

// Velocity network conditioned on observation, noisy action, and flow time.
// Parameters live externally; the policy object is an immutable description
// safe to share across workers.
class FlowPolicy {
 public:
  FlowPolicy() = default;

  FlowPolicy(const FlowPolicyCfg& cfg, int obs_dim, int act_dim, ParamSet* params,
             const std::string& name = "policy")
      : cfg_(cfg), obs_dim_(obs_dim), act_dim_(act_dim), embed_{cfg.time_embed_dim} {
    cfg_.validate();
    std::vector<int> sizes;
    sizes.push_back(obs_dim + act_dim + cfg.time_embed_dim);
    for (int h : cfg.hidden) sizes.push_back(h);
    sizes.push_back(act_dim);
    net_ = Mlp(sizes, cfg.activation, params, name);
  }

  const FlowPolicyCfg& cfg() const { return cfg_; }
  const Mlp& net() const { return net_; }
  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return act_dim_; }

  void init_params(ParamSet* params, Rng& rng) const {
    // Final layer near zero so the initial action marginal is close to the
    // noise prior.
    net_.init_params(params, rng, 0.01);
  }

  // Input rows [obs | x_tau | time_features(tau)], one shared tau.
  Matrix assemble_input(const Matrix& obs, const Matrix& x, double tau) const {
    std::vector<double> emb(cfg_.time_embed_dim);
    embed_.eval(tau, emb.data());
    Matrix in(obs.rows, net_.input_dim());
    for (int i = 0; i < obs.rows; ++i) {
      double* row = in.row_ptr(i);
      for (int j = 0; j < obs_dim_; ++j) row[j] = obs.at(i, j);
      for (int j = 0; j < act_dim_; ++j) row[obs_dim_ + j] = x.at(i, j);
      for (int j = 0; j < cfg_.time_embed_dim; ++j) row[obs_dim_ + act_dim_ + j] = emb[j];
    }
    return in;
  }

  // Batched velocity evaluation (values only).
  Matrix velocity(const ParamSet& params, const Matrix& obs, const Matrix& x, double tau) const {
    Tape tape(false);
    Mlp::Leaves lv = net_.leaves(tape, params);
    Tape::Ref out = net_.forward(tape, lv, tape.constant(assemble_input(obs, x, tau)));
    return tape.value(out);
  }

  struct McLossNodes {
    Tape::Ref per_pair;    // (n * n_mc) x 1
    Tape::Ref per_sample;  // n x 1, mean over this sample's pairs
  };

  // Matching losses for stored (tau, eps) draws, one row per pair, rows
  // sample-major. This single builder serves rollout logging, update-time
  // recomputation, and gradient steps, so recomputed losses are bit-exact.
  McLossNodes mc_loss_nodes(Tape& tape, const Mlp::Leaves& lv, const Matrix& obs,
                            const Matrix& actions, const double* taus, const double* eps,
                            int n_mc) const {
    const int n = obs.rows;
    const int rows = n * n_mc;
    Matrix in(rows, net_.input_dim());
    Matrix resid_scale(rows, 1, 1.0);  // eps_mse: cv per row; u_mse: 1
    Matrix resid_const(rows, act_dim_);  // eps_mse: cx*x - eps; u_mse: -(a - eps)
    Matrix loss_scale(rows, 1, 1.0);  // eps_mse: (1/2) w |dlambda|; u_mse: 1
    std::vector<double> emb(cfg_.time_embed_dim);

    for (int i = 0; i < n; ++i) {
      for (int p = 0; p < n_mc; ++p) {
        const int r = i * n_mc + p;
        const double tau = taus[static_cast<size_t>(i) * n_mc + p];
        const double* e = eps + (static_cast<size_t>(i) * n_mc + p) * act_dim_;
        double alpha = 0.0, sigma = 0.0;
        cfg_.schedule.alpha_sigma(tau, &alpha, &sigma);
        double* row = in.row_ptr(r);
        for (int j = 0; j < obs_dim_; ++j) row[j] = obs.at(i, j);
        for (int j = 0; j < act_dim_; ++j) {
          row[obs_dim_ + j] = alpha * actions.at(i, j) + sigma * e[j];
        }
        embed_.eval(tau, emb.data());
        for (int j = 0; j < cfg_.time_embed_dim; ++j) row[obs_dim_ + act_dim_ + j] = emb[j];

        if (cfg_.mc_param == McParam::kEpsMse) {
          const SchedulePoint pt = cfg_.schedule.eval(tau);
          double cv = 0.0, cx = 0.0;
          cfg_.schedule.eps_hat_coeffs(pt, &cv, &cx);
          resid_scale.data[r] = cv;
          for (int j = 0; j < act_dim_; ++j) {
            resid_const.at(r, j) = cx * row[obs_dim_ + j] - e[j];
          }
          loss_scale.data[r] = 0.5 * cfg_.weighting.eval(pt.lambda) * pt.dlambda;
        } else {
          for (int j = 0; j < act_dim_; ++j) {
            resid_const.at(r, j) = -(actions.at(i, j) - e[j]);
          }
        }
      }
    }

    Tape::Ref v = net_.forward(tape, lv, tape.constant(std::move(in)));
    Tape::Ref resid = tape.add(tape.scale_rows(v, resid_scale), tape.constant(std::move(resid_const)));
    Tape::Ref sq = tape.row_sum(tape.mul(resid, resid));
    Tape::Ref per_pair = tape.scale_rows(sq, loss_scale);
    Tape::Ref per_sample = tape.row_mean(tape.reshape(per_pair, n, n_mc));
    return {per_pair, per_sample};
  }

  // Mean matching loss per sample under the given parameters, using stored
  // draws (values only).
  Matrix mc_loss_values(const ParamSet& params, const Matrix& obs, const Matrix& actions,
                        const double* taus, const double* eps, int n_mc) const {
    Tape tape(false);
    Mlp::Leaves lv = net_.leaves(tape, params);
    McLossNodes nodes = mc_loss_nodes(tape, lv, obs, actions, taus, eps, n_mc);
    return tape.value(nodes.per_sample);
  }

  // Per-step Gaussian log-likelihood of a stored denoising path:
  //   sum_k log N(x_{k+1}; x_k + h v(x_k, tau_k), sigma_t^2 I).
  // path_states holds n_steps + 1 states of E x act each.
  Tape::Ref path_logp_nodes(Tape& tape, const Mlp::Leaves& lv, const Matrix& obs,
                            const std::vector<Matrix>& path_states, double sigma_t) const {
    const int n_steps = static_cast<int>(path_states.size()) - 1;
    if (n_steps < 1) throw std::invalid_argument("path_logp: need at least one step");
    if (sigma_t <= 0.0) throw std::invalid_argument("path_logp: sigma_t must be positive");
    const double h = 1.0 / n_steps;
    const double inv_two_var = -1.0 / (2.0 * sigma_t * sigma_t);
    const double log_norm = -0.5 * act_dim_ * std::log(6.283185307179586 * sigma_t * sigma_t);
    Tape::Ref total{};
    for (int k = 0; k < n_steps; ++k) {
      const double tau = static_cast<double>(k) / n_steps;
      Tape::Ref xk = tape.constant(path_states[k]);
      Tape::Ref v = net_.forward(tape, lv, tape.constant(assemble_input(obs, path_states[k], tau)));
      Tape::Ref mean = tape.add(xk, tape.affine(v, h, 0.0));
      Tape::Ref diff = tape.sub(tape.constant(path_states[k + 1]), mean);
      Tape::Ref sq = tape.row_sum(tape.mul(diff, diff));
      Tape::Ref logp_k = tape.affine(sq, inv_two_var, log_norm);
      total = k == 0 ? logp_k : tape.add(total, logp_k);
    }
    return total;
  }

  // Draw a batch of actions, one per observation row. Streams are per row:
  // noise_rngs seed the prior (and churn), mc_rngs the (tau, eps) draws.
  // want_path additionally records the denoising chain (stochastic sampler
  // only) together with its log-likelihood under the current parameters.
  FlowSampleBatch sample_actions(const ParamSet& params, const Matrix& obs, Rng* noise_rngs,
                                 Rng* mc_rngs, bool want_path = false) const {
    const int n = obs.rows;
    FlowSampleBatch out;
    out.noise_init = Matrix(n, act_dim_);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < act_dim_; ++j) out.noise_init.at(i, j) = noise_rngs[i].normal();
    }

    auto field = [&](const Matrix& x, double tau) { return velocity(params, obs, x, tau); };

    if (want_path) {
      if (cfg_.sampler.method != SamplerMethod::kStochasticEuler) {
        throw std::invalid_argument("path recording requires the stochastic sampler");
      }
      const int steps = cfg_.sampler.n_steps;
      const double h = 1.0 / steps;
      Matrix x = out.noise_init;
      out.path_states.push_back(x);
      for (int k = 0; k < steps; ++k) {
        Matrix v = field(x, static_cast<double>(k) / steps);
        Matrix mean(n, act_dim_);
        for (int i = 0; i < x.size(); ++i) mean.data[i] = x.data[i] + h * v.data[i];
        out.path_means.push_back(mean);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < act_dim_; ++j) {
            x.at(i, j) = mean.at(i, j) + cfg_.sampler.churn_std * noise_rngs[i].normal();
          }
        }
        x.require_finite("flow sampling path");
        out.path_states.push_back(x);
      }
      out.actions = x;
      Tape tape(false);
      Mlp::Leaves lv = net_.leaves(tape, params);
      out.path_logp_old =
          tape.value(path_logp_nodes(tape, lv, obs, out.path_states, cfg_.sampler.churn_std));
    } else {
      out.actions = integrate(field, out.noise_init, cfg_.sampler, noise_rngs);
    }

    // Log fresh (tau, eps) draws and their losses under the parameters that
    // produced the actions.
    const int n_mc = cfg_.n_mc;
    out.mc_tau = Matrix(n, n_mc);
    out.mc_eps = Matrix(n * n_mc, act_dim_);
    for (int i = 0; i < n; ++i) {
      for (int p = 0; p < n_mc; ++p) {
        CfmSample s = CfmSample::draw(cfg_.schedule, act_dim_, mc_rngs[i]);
        out.mc_tau.at(i, p) = s.tau;
        for (int j = 0; j < act_dim_; ++j) out.mc_eps.at(i * n_mc + p, j) = s.eps[j];
      }
    }
    Tape tape(false);
    Mlp::Leaves lv = net_.leaves(tape, params);
    McLossNodes nodes =
        mc_loss_nodes(tape, lv, obs, out.actions, out.mc_tau.data.data(), out.mc_eps.data.data(), n_mc);
    const Matrix& per_pair = tape.value(nodes.per_pair);
    out.mc_loss_old = Matrix(n, n_mc);
    out.mc_loss_old.data = per_pair.data;
    return out;
  }

 private:
  FlowPolicyCfg cfg_;
  int obs_dim_ = 0;
  int act_dim_ = 0;
  TimeEmbed embed_;
  Mlp net_;
};

struct GaussianPolicyCfg {
  std::vector<int> hidden{32, 32};
  Activation activation = Activation::kTanh;
  double init_log_std = 0.0;
};

struct GaussianSampleBatch {
  Matrix actions;   // E x act
  Matrix logp_old;  // E x 1
};

// Diagonal Gaussian policy: tanh-squashed state-dependent mean scaled to
// the action range, state-independent log-std. Samples are unbounded; the
// environment clips.
class GaussianPolicy {
 public:
  GaussianPolicy() = default;

  GaussianPolicy(const GaussianPolicyCfg& cfg, int obs_dim, int act_dim, double action_scale,
                 ParamSet* params, const std::string& name = "policy")
      : cfg_(cfg), obs_dim_(obs_dim), act_dim_(act_dim), action_scale_(action_scale) {
    std::vector<int> sizes;
    sizes.push_back(obs_dim);
    for (int h : cfg.hidden) sizes.push_back(h);
    sizes.push_back(act_dim);
    net_ = Mlp(sizes, cfg.activation, params, name);
    log_std_id_ = params->add(name + ".log_std", 1, act_dim);
  }

  const Mlp& net() const { return net_; }
  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return act_dim_; }
  double action_scale() const { return action_scale_; }
  int log_std_segment() const { return log_std_id_; }

  void init_params(ParamSet* params, Rng& rng) const {
    net_.init_params(params, rng, 0.01);
    params->set_segment(log_std_id_, Matrix(1, act_dim_, cfg_.init_log_std));
  }

  struct Leaves {
    Mlp::Leaves net;
    Tape::Ref log_std;
  };

  Leaves leaves(Tape& tape, const ParamSet& params) const {
    Leaves lv;
    lv.net = net_.leaves(tape, params);
    lv.log_std = tape.leaf(params.segment_matrix(log_std_id_), true);
    return lv;
  }

  Tape::Ref mean_nodes(Tape& tape, const Leaves& lv, Tape::Ref obs) const {
    return tape.affine(tape.tanh_of(net_.forward(tape, lv.net, obs)), action_scale_, 0.0);
  }

  // log N(a; mu(o), diag(exp(log_std))^2), one row per sample.
  Tape::Ref logp_nodes(Tape& tape, const Leaves& lv, const Matrix& obs, const Matrix& actions) const {
    Tape::Ref mu = mean_nodes(tape, lv, tape.constant(obs));
    Tape::Ref diff = tape.sub(tape.constant(actions), mu);
    Tape::Ref inv_sigma = tape.exp_of(tape.neg(lv.log_std));
    Tape::Ref z = tape.mul_rowvec(diff, inv_sigma);
    Tape::Ref quad = tape.affine(tape.row_sum(tape.mul(z, z)), -0.5,
                                 -0.5 * act_dim_ * std::log(6.283185307179586));
    Tape::Ref neg_sum_log_std = tape.affine(tape.sum_all(lv.log_std), -1.0, 0.0);
    return tape.add_rowvec(quad, neg_sum_log_std);
  }

  // Differential entropy of the current Gaussian (scalar node).
  Tape::Ref entropy_node(Tape& tape, const Leaves& lv) const {
    const double c = 0.5 * std::log(6.283185307179586 * 2.718281828459045);
    return tape.affine(tape.sum_all(lv.log_std), 1.0, act_dim_ * c);
  }

  Matrix mean_values(const ParamSet& params, const Matrix& obs) const {
    Tape tape(false);
    Leaves lv = leaves(tape, params);
    return tape.value(mean_nodes(tape, lv, tape.constant(obs)));
  }

  Matrix logp_values(const ParamSet& params, const Matrix& obs, const Matrix& actions) const {
    Tape tape(false);
    Leaves lv = leaves(tape, params);
    return tape.value(logp_nodes(tape, lv, obs, actions));
  }

  GaussianSampleBatch sample_actions(const ParamSet& params, const Matrix& obs, Rng* noise_rngs) const {
    const int n = obs.rows;
    Matrix mu = mean_values(params, obs);
    Matrix sigma = params.segment_matrix(log_std_id_);
    for (double& s : sigma.data) s = std::exp(s);
    GaussianSampleBatch out;
    out.actions = Matrix(n, act_dim_);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < act_dim_; ++j) {
        out.actions.at(i, j) = mu.at(i, j) + sigma.data[j] * noise_rngs[i].normal();
      }
    }
    out.logp_old = logp_values(params, obs, out.actions);
    return out;
  }

 private:
  GaussianPolicyCfg cfg_;
  int obs_dim_ = 0;
  int act_dim_ = 0;
  double action_scale_ = 1.0;
  Mlp net_;
  int log_std_id_ = -1;
};

}  // namespace fpo
