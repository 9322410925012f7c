#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpo/algo.hpp"
#include "fpo/checkpoint.hpp"
#include "fpo/config.hpp"
#include "fpo/env.hpp"
#include "fpo/policy.hpp"
#include "fpo/rollout.hpp"

namespace fpo {

struct EvalSummary {
  int episodes = 0;
  double return_mean = 0.0;
  double return_stderr = 0.0;
  double success_rate = 0.0;
  std::vector<double> episode_returns;
  std::vector<int> episode_lengths;
  std::vector<uint8_t> episode_success;
};

struct TrainOutcome {
  std::string checkpoint_path;
  std::string metrics_path;
  int batches_run = 0;
  int64_t env_steps = 0;
  EvalSummary final_eval;
  // First batch index (1-based) whose evaluation met stop_success_rate;
  // -1 if never.
  int first_success_batch = -1;
};

struct ModeReport {
  int n_samples = 0;
  int n_modes = 1;
  double mass_a = 1.0;
  double mass_b = 0.0;
  double separation = 0.0;
  double spread = 0.0;
  double separation_ratio = 0.0;
  double dominant_mass = 1.0;
  std::vector<double> centroid_a;
  std::vector<double> centroid_b;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  var /= static_cast<double>(v.size() - 1);
  return std::sqrt(var / static_cast<double>(v.size()));
}

// Two-means on action directions with a merge rule: clusters whose
// separation does not dominate the intra-cluster spread are one mode.
inline ModeReport direction_modes(const Matrix& actions, double ratio_threshold = 4.0) {
  const int n = actions.rows;
  const int d = actions.cols;
  ModeReport rep;
  rep.n_samples = n;
  if (n < 2) return rep;

  Matrix dirs(n, d);
  for (int i = 0; i < n; ++i) {
    double norm = 0.0;
    for (int j = 0; j < d; ++j) norm += actions.at(i, j) * actions.at(i, j);
    norm = std::sqrt(norm);
    for (int j = 0; j < d; ++j) dirs.at(i, j) = norm > 1e-12 ? actions.at(i, j) / norm : (j == 0 ? 1.0 : 0.0);
  }

  auto dist2 = [&](const double* a, const double* b) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return s;
  };

  // deterministic seeding: first point, then the farthest point from it
  std::vector<double> c1(dirs.row_ptr(0), dirs.row_ptr(0) + d);
  int far = 1;
  double far_d = -1.0;
  for (int i = 1; i < n; ++i) {
    const double dd = dist2(dirs.row_ptr(i), c1.data());
    if (dd > far_d) {
      far_d = dd;
      far = i;
    }
  }
  std::vector<double> c2(dirs.row_ptr(far), dirs.row_ptr(far) + d);

  std::vector<uint8_t> assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      const uint8_t z = dist2(dirs.row_ptr(i), c1.data()) <= dist2(dirs.row_ptr(i), c2.data()) ? 0 : 1;
      if (z != assign[i]) {
        assign[i] = z;
        changed = true;
      }
    }
    std::vector<double> s1(d, 0.0), s2(d, 0.0);
    int n1 = 0, n2 = 0;
    for (int i = 0; i < n; ++i) {
      double* s = assign[i] == 0 ? s1.data() : s2.data();
      for (int j = 0; j < d; ++j) s[j] += dirs.at(i, j);
      (assign[i] == 0 ? n1 : n2) += 1;
    }
    if (n1 > 0)
      for (int j = 0; j < d; ++j) c1[j] = s1[j] / n1;
    if (n2 > 0)
      for (int j = 0; j < d; ++j) c2[j] = s2[j] / n2;
    if (!changed && iter > 0) break;
  }

  int n1 = 0;
  double spread_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* c = assign[i] == 0 ? c1.data() : c2.data();
    spread_sum += std::sqrt(dist2(dirs.row_ptr(i), c));
    if (assign[i] == 0) ++n1;
  }
  rep.mass_a = static_cast<double>(n1) / n;
  rep.mass_b = 1.0 - rep.mass_a;
  rep.separation = std::sqrt(dist2(c1.data(), c2.data()));
  rep.spread = spread_sum / n;
  rep.separation_ratio = rep.separation / std::max(rep.spread, 1e-12);
  rep.centroid_a = c1;
  rep.centroid_b = c2;
  const double min_mass = std::min(rep.mass_a, rep.mass_b);
  if (rep.separation_ratio >= ratio_threshold && min_mass >= 0.05) {
    rep.n_modes = 2;
    rep.dominant_mass = std::max(rep.mass_a, rep.mass_b);
  } else {
    rep.n_modes = 1;
    rep.dominant_mass = 1.0;
  }
  return rep;
}

// Shared evaluation core: one fresh env per episode, frozen policy,
// deterministic integration (flow) or mean actions (gaussian).
struct PolicyView {
  bool is_gaussian = false;
  const FlowPolicy* flow = nullptr;
  const GaussianPolicy* gaussian = nullptr;
  const ParamSet* params = nullptr;
  const RunningNorm* norm = nullptr;
  bool normalize = true;

  void normalize_row(const std::vector<double>& raw, double* out) const {
    if (normalize) {
      norm->normalize(std::span<const double>(raw.data(), raw.size()),
                      std::span<double>(out, raw.size()));
    } else {
      std::copy(raw.begin(), raw.end(), out);
    }
  }
};

inline EvalSummary run_eval(const PolicyView& view, const std::string& env_key, int episodes,
                            Rng eval_root, SamplerCfg sampler, bool from_probe_state = false) {
  EvalSummary out;
  out.episodes = episodes;
  if (episodes <= 0) return out;

  std::vector<uint64_t> seeds(episodes);
  for (int i = 0; i < episodes; ++i) seeds[i] = eval_root.split(Stream::kEval, i + 1).seed();
  VecEnv evs(env_key, episodes, seeds);
  evs.reset_all();
  if (from_probe_state) evs.reset_all_to_probe_state();
  const EnvSpec& spec = evs.spec();

  if (sampler.method == SamplerMethod::kStochasticEuler) {
    // frozen-policy evaluation never injects churn
    sampler.method = SamplerMethod::kEuler;
    sampler.churn_std = 0.0;
  }
  std::vector<Rng> eval_noise;
  for (int i = 0; i < episodes; ++i) eval_noise.push_back(eval_root.split(Stream::kActionNoise, i));

  std::vector<double> ep_return(episodes, 0.0);
  std::vector<int> ep_len(episodes, 0);
  std::vector<uint8_t> done(episodes, 0), success(episodes, 0);
  int alive = episodes;

  for (int step = 0; step <= spec.max_steps && alive > 0; ++step) {
    Matrix obs(episodes, spec.obs_dim);
    for (int e = 0; e < episodes; ++e) view.normalize_row(evs.observation(e), obs.row_ptr(e));

    Matrix actions(episodes, spec.act_dim);
    if (view.is_gaussian) {
      actions = view.gaussian->mean_values(*view.params, obs);
    } else {
      Matrix noise(episodes, spec.act_dim);
      for (int e = 0; e < episodes; ++e)
        for (int j = 0; j < spec.act_dim; ++j) noise.at(e, j) = eval_noise[e].normal();
      auto field = [&](const Matrix& x, double tau) {
        return view.flow->velocity(*view.params, obs, x, tau);
      };
      actions = integrate(field, noise, sampler, eval_noise.data());
    }
    // finished episodes keep stepping their env copy but stop recording
    VecEnv::BatchStep s = evs.step(actions.data);
    for (int e = 0; e < episodes; ++e) {
      if (done[e]) continue;
      ep_return[e] += s.rewards[e];
      ep_len[e] += 1;
      if (s.terminated[e] || s.truncated[e]) {
        done[e] = 1;
        success[e] = evs.env(e).is_success(ep_return[e]) ? 1 : 0;
        --alive;
      }
    }
  }

  out.episode_returns = ep_return;
  out.episode_lengths = ep_len;
  out.episode_success = success;
  out.return_mean = mean_of(ep_return);
  out.return_stderr = stderr_of(ep_return);
  double sr = 0.0;
  for (uint8_t v : success) sr += v;
  out.success_rate = sr / episodes;
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << text;
}

}  // namespace detail

// Owns everything a single training run needs. Collection, updates, and
// evaluation consume disjoint derived rng streams, so runs are
// reproducible and any single knob perturbs exactly one stream.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg)
      : cfg_(cfg),
        root_(cfg.seed),
        shuffle_rng_(root_.split(Stream::kShuffle)),
        envs_(cfg.env, cfg.num_envs, env_seeds(cfg.seed, cfg.num_envs)),
        obs_norm_(envs_.spec().obs_dim) {
    cfg_.validate();
    const EnvSpec& spec = envs_.spec();
    action_scale_ = spec.action_high;

    for (int i = 0; i < cfg_.num_envs; ++i) {
      noise_rngs_.push_back(root_.split(Stream::kActionNoise, i));
      mc_rngs_.push_back(root_.split(Stream::kMcDraws, i));
    }

    Rng init_rng = root_.split(Stream::kInit);
    if (cfg_.algo == "ppo_gaussian") {
      GaussianPolicyCfg gp;
      gp.hidden = cfg_.policy_hidden;
      gp.activation = activation_from_name(cfg_.activation);
      gaussian_ = GaussianPolicy(gp, spec.obs_dim, spec.act_dim, action_scale_, &policy_params_);
      gaussian_.init_params(&policy_params_, init_rng);
    } else {
      flow_ = FlowPolicy(cfg_.flow_policy_cfg(), spec.obs_dim, spec.act_dim, &policy_params_);
      flow_.init_params(&policy_params_, init_rng);
    }
    std::vector<int> vsizes;
    vsizes.push_back(spec.obs_dim);
    for (int h : cfg_.value_hidden) vsizes.push_back(h);
    vsizes.push_back(1);
    value_net_ = Mlp(vsizes, activation_from_name(cfg_.activation), &value_params_, "value");
    value_net_.init_params(&value_params_, init_rng, 1.0);

    policy_adam_ = AdamState(policy_params_.values.size(), cfg_.learning_rate);
    value_adam_ = AdamState(value_params_.values.size(), cfg_.learning_rate);

    envs_.reset_all();
  }

  const RunConfig& cfg() const { return cfg_; }
  const EnvSpec& env_spec() const { return envs_.spec(); }
  ParamSet& policy_params() { return policy_params_; }
  const FlowPolicy& flow_policy() const { return flow_; }
  const GaussianPolicy& gaussian_policy() const { return gaussian_; }
  const Mlp& value_net() const { return value_net_; }
  int64_t env_steps() const { return env_steps_; }

  // One batch of experience into buf. Observation statistics stay frozen
  // while collecting and absorb the batch afterwards.
  void collect(RolloutBuffer* buf) {
    const EnvSpec& spec = envs_.spec();
    const int E = cfg_.num_envs;
    const int T = cfg_.unroll_length;
    const bool dppo = cfg_.algo == "dppo";
    const int denoise = dppo ? cfg_.sampler_steps : 0;
    buf->allocate(E, T, spec.obs_dim, spec.act_dim, cfg_.algo == "ppo_gaussian" ? 0 : cfg_.n_mc, denoise);

    std::vector<double> raw_batch;  // for the post-batch normalizer update
    raw_batch.reserve(static_cast<size_t>(E) * T * spec.obs_dim);
    struct PendingBootstrap {
      int index;
      std::vector<double> obs_raw;
    };
    std::vector<PendingBootstrap> pending;

    for (int t = 0; t < T; ++t) {
      Matrix obs(E, spec.obs_dim);
      for (int e = 0; e < E; ++e) {
        const std::vector<double>& raw = envs_.observation(e);
        raw_batch.insert(raw_batch.end(), raw.begin(), raw.end());
        normalize_row(raw, obs.row_ptr(e));
      }
      Matrix values = value_net_.forward_values(value_params_, obs);

      Matrix actions;
      if (cfg_.algo == "ppo_gaussian") {
        GaussianSampleBatch s = gaussian_.sample_actions(policy_params_, obs, noise_rngs_.data());
        actions = s.actions;
        for (int e = 0; e < E; ++e) buf->logp_old[idx(e, t, T)] = s.logp_old.data[e];
      } else {
        FlowSampleBatch s =
            flow_.sample_actions(policy_params_, obs, noise_rngs_.data(), mc_rngs_.data(), dppo);
        actions = s.actions;
        const int n_mc = cfg_.n_mc;
        for (int e = 0; e < E; ++e) {
          const int i = idx(e, t, T);
          std::copy(s.mc_tau.row_ptr(e), s.mc_tau.row_ptr(e) + n_mc, buf->mc_tau.data() + static_cast<size_t>(i) * n_mc);
          std::copy(s.mc_eps.row_ptr(e * n_mc), s.mc_eps.row_ptr(e * n_mc) + n_mc * spec.act_dim,
                    buf->mc_eps.data() + static_cast<size_t>(i) * n_mc * spec.act_dim);
          std::copy(s.mc_loss_old.row_ptr(e), s.mc_loss_old.row_ptr(e) + n_mc,
                    buf->mc_loss_old.data() + static_cast<size_t>(i) * n_mc);
          if (dppo) {
            buf->path_logp_old[i] = s.path_logp_old.data[e];
            const size_t sstride = static_cast<size_t>(denoise + 1) * spec.act_dim;
            const size_t mstride = static_cast<size_t>(denoise) * spec.act_dim;
            for (int k = 0; k <= denoise; ++k) {
              std::copy(s.path_states[k].row_ptr(e), s.path_states[k].row_ptr(e) + spec.act_dim,
                        buf->path_states.data() + i * sstride + static_cast<size_t>(k) * spec.act_dim);
            }
            for (int k = 0; k < denoise; ++k) {
              std::copy(s.path_means[k].row_ptr(e), s.path_means[k].row_ptr(e) + spec.act_dim,
                        buf->path_means.data() + i * mstride + static_cast<size_t>(k) * spec.act_dim);
            }
          }
        }
      }

      VecEnv::BatchStep step = envs_.step(actions.data);
      for (int e = 0; e < E; ++e) {
        const int i = idx(e, t, T);
        std::copy(actions.row_ptr(e), actions.row_ptr(e) + spec.act_dim,
                  buf->actions.data() + static_cast<size_t>(i) * spec.act_dim);
        std::copy(obs.row_ptr(e), obs.row_ptr(e) + spec.obs_dim,
                  buf->obs.data() + static_cast<size_t>(i) * spec.obs_dim);
        buf->rewards[i] = step.rewards[e] * cfg_.reward_scale;
        buf->values[i] = values.data[e];
        buf->terminated[i] = step.terminated[e];
        buf->truncated[i] = step.truncated[e];
        if (step.truncated[e]) pending.push_back({i, step.final_obs[e]});
      }
      env_steps_ += E;
    }

    // Tail bootstrap: value of each env's live observation.
    Matrix tail(E, spec.obs_dim);
    for (int e = 0; e < E; ++e) normalize_row(envs_.observation(e), tail.row_ptr(e));
    Matrix tail_values = value_net_.forward_values(value_params_, tail);

    // Truncation bootstraps: value of the pre-reset observation.
    if (!pending.empty()) {
      Matrix pm(static_cast<int>(pending.size()), spec.obs_dim);
      for (size_t p = 0; p < pending.size(); ++p) normalize_row(pending[p].obs_raw, pm.row_ptr(static_cast<int>(p)));
      Matrix pv = value_net_.forward_values(value_params_, pm);
      for (size_t p = 0; p < pending.size(); ++p) buf->next_values[pending[p].index] = pv.data[p];
    }

    for (int e = 0; e < E; ++e) {
      for (int t = 0; t < T; ++t) {
        const int i = idx(e, t, T);
        if (buf->terminated[i]) {
          buf->next_values[i] = 0.0;
        } else if (buf->truncated[i]) {
          // already filled
        } else if (t + 1 == T) {
          buf->next_values[i] = tail_values.data[e];
        } else {
          buf->next_values[i] = buf->values[idx(e, t + 1, T)];
        }
      }
    }

    if (cfg_.normalize_observations) {
      Matrix rb(E * T, spec.obs_dim);
      rb.data = std::move(raw_batch);
      obs_norm_.update_batch(rb);
    }
  }

  UpdateStats update(RolloutBuffer* buf) {
    buf->compute_advantages(cfg_.gae_cfg());
    if (cfg_.algo == "fpo") {
      FpoCfg f;
      f.eps_clip = cfg_.fpo_eps_clip;
      f.ratio_log_clamp = cfg_.ratio_log_clamp;
      return fpo_update(*buf, flow_, &policy_params_, &policy_adam_, value_net_, &value_params_,
                        &value_adam_, f, cfg_.update_cfg(), shuffle_rng_);
    }
    if (cfg_.algo == "ppo_gaussian") {
      PpoGaussianCfg g;
      g.eps_clip = cfg_.ppo_eps_clip;
      g.entropy_coef = cfg_.entropy_coef;
      g.ratio_log_clamp = cfg_.ratio_log_clamp;
      return ppo_gaussian_update(*buf, gaussian_, &policy_params_, &policy_adam_, value_net_,
                                 &value_params_, &value_adam_, g, cfg_.update_cfg(), shuffle_rng_);
    }
    DppoCfg d;
    d.eps_clip = cfg_.dppo_eps_clip;
    d.sigma_t = cfg_.sigma_t;
    d.ratio_log_clamp = cfg_.ratio_log_clamp;
    return dppo_update(*buf, flow_, &policy_params_, &policy_adam_, value_net_, &value_params_,
                       &value_adam_, d, cfg_.update_cfg(), shuffle_rng_);
  }

  // Deterministic evaluation with a frozen policy: deterministic
  // integration for flow policies, the mean action for gaussians. salt
  // picks the eval stream, so equal salts reproduce bit-identically.
  EvalSummary evaluate(int episodes, uint64_t salt = 0,
                       const std::optional<SamplerCfg>& sampler_override = std::nullopt,
                       bool from_probe_state = false) const {
    detail::PolicyView view;
    view.is_gaussian = cfg_.algo == "ppo_gaussian";
    view.flow = &flow_;
    view.gaussian = &gaussian_;
    view.params = &policy_params_;
    view.norm = &obs_norm_;
    view.normalize = cfg_.normalize_observations;
    SamplerCfg sampler = cfg_.sampler_cfg();
    if (sampler_override) sampler = *sampler_override;
    return detail::run_eval(view, cfg_.env, episodes, root_.split(Stream::kEval, salt), sampler,
                            from_probe_state);
  }

  Checkpoint make_checkpoint() const {
    Checkpoint c;
    const EnvSpec& spec = envs_.spec();
    c.kind = cfg_.algo == "ppo_gaussian" ? PolicyKind::kGaussian : PolicyKind::kFlow;
    c.env_key = cfg_.env;
    c.obs_dim = spec.obs_dim;
    c.act_dim = spec.act_dim;
    c.action_scale = action_scale_;
    c.schedule = schedule_from_name(cfg_.schedule);
    c.tau_min = cfg_.tau_min;
    c.weighting = weighting_from_name(cfg_.mc_weighting);
    c.mc_param = mc_param_from_name(cfg_.mc_param);
    c.sampler = cfg_.sampler_cfg();
    c.n_mc = cfg_.n_mc;
    c.time_embed_dim = cfg_.time_embed_dim;
    c.activation = activation_from_name(cfg_.activation);
    if (cfg_.algo == "ppo_gaussian") {
      c.policy_sizes = gaussian_.net().sizes();
    } else {
      c.policy_sizes = flow_.net().sizes();
    }
    c.value_sizes = value_net_.sizes();
    c.obs_norm_enabled = cfg_.normalize_observations;
    c.obs_norm_count = obs_norm_.count();
    c.obs_norm_mean = obs_norm_.mean();
    c.obs_norm_m2 = obs_norm_.m2();
    c.policy_values = policy_params_.values;
    c.value_values = value_params_.values;
    c.policy_step = policy_params_.step;
    c.value_step = value_params_.step;
    return c;
  }

  // Full training loop with metrics and checkpoint files under
  // cfg.out_dir. Wall-clock timings go to a sidecar so the metrics file is
  // byte-identical across reruns of the same (config, seed).
  TrainOutcome run() {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.out_dir);
    const std::string metrics_path = cfg_.out_dir + "/metrics.jsonl";
    const std::string timing_path = cfg_.out_dir + "/timing.jsonl";
    const std::string ckpt_path = cfg_.out_dir + "/checkpoint.bin";
    detail::write_text_file(cfg_.out_dir + "/config.resolved.txt", cfg_.to_text());

    std::ofstream metrics(metrics_path);
    std::ofstream timing(timing_path);
    if (!metrics || !timing) throw std::runtime_error("cannot write outputs under " + cfg_.out_dir);

    TrainOutcome outcome;
    outcome.metrics_path = metrics_path;
    outcome.checkpoint_path = ckpt_path;

    RolloutBuffer buf;
    std::vector<double> good_policy = policy_params_.values;
    std::vector<double> good_value = value_params_.values;

    for (int b = 0; b < cfg_.total_batches; ++b) {
      const auto t0 = std::chrono::steady_clock::now();
      good_policy = policy_params_.values;
      good_value = value_params_.values;

      UpdateStats stats;
      try {
        collect(&buf);
        stats = update(&buf);
      } catch (const std::exception& e) {
        // save the last good parameters before surfacing the failure
        policy_params_.values = good_policy;
        value_params_.values = good_value;
        make_checkpoint().save(ckpt_path);
        throw std::runtime_error(std::string("training aborted at batch ") + std::to_string(b + 1) +
                                 ": " + e.what());
      }

      if (cfg_.debug_buffer_dump) dump_buffer(buf, cfg_.out_dir + "/buffer_last.jsonl");

      nlohmann::json row;
      row["batch"] = b + 1;
      row["env_steps"] = env_steps_;
      row["surrogate"] = stats.surrogate;
      row["value_loss"] = stats.value_loss;
      row["clip_fraction"] = stats.clip_fraction;
      row["mean_ratio"] = stats.mean_ratio;
      row["approx_kl"] = stats.approx_kl;
      row["grad_norm"] = stats.grad_norm;

      bool stop = false;
      const bool eval_now = (cfg_.eval_every > 0 && (b + 1) % cfg_.eval_every == 0) ||
                            b + 1 == cfg_.total_batches;
      if (eval_now) {
        EvalSummary ev = evaluate(cfg_.eval_episodes, static_cast<uint64_t>(b + 1));
        row["eval_return_mean"] = ev.return_mean;
        row["eval_return_stderr"] = ev.return_stderr;
        row["eval_success_rate"] = ev.success_rate;
        outcome.final_eval = ev;
        if (outcome.first_success_batch < 0 && cfg_.stop_success_rate > 0.0 &&
            ev.success_rate >= cfg_.stop_success_rate) {
          outcome.first_success_batch = b + 1;
          stop = true;
        }
      }
      metrics << row.dump() << "\n";
      metrics.flush();

      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      timing << "{\"batch\": " << (b + 1) << ", \"seconds\": " << secs << "}\n";

      outcome.batches_run = b + 1;
      if (stop) break;
    }

    make_checkpoint().save(ckpt_path);
    outcome.env_steps = env_steps_;
    write_summary(cfg_.out_dir + "/summary.csv", metrics_path);
    return outcome;
  }

  void normalize_row(const std::vector<double>& raw, double* out) const {
    if (cfg_.normalize_observations) {
      obs_norm_.normalize(std::span<const double>(raw.data(), raw.size()),
                          std::span<double>(out, raw.size()));
    } else {
      std::copy(raw.begin(), raw.end(), out);
    }
  }

  const RunningNorm& obs_norm() const { return obs_norm_; }

  static std::vector<uint64_t> env_seeds(uint64_t run_seed, int n) {
    std::vector<uint64_t> seeds(n);
    Rng base(run_seed);
    for (int i = 0; i < n; ++i) seeds[i] = base.split(Stream::kEnvReset, i + 1).seed();
    return seeds;
  }

 private:
  static int idx(int e, int t, int T) { return e * T + t; }

  void dump_buffer(const RolloutBuffer& buf, const std::string& path) const {
    std::ofstream out(path);
    for (int i = 0; i < buf.n_transitions(); ++i) {
      nlohmann::json row;
      row["obs"] = std::vector<double>(buf.obs.begin() + static_cast<size_t>(i) * buf.obs_dim,
                                       buf.obs.begin() + static_cast<size_t>(i + 1) * buf.obs_dim);
      row["action"] = std::vector<double>(buf.actions.begin() + static_cast<size_t>(i) * buf.act_dim,
                                          buf.actions.begin() + static_cast<size_t>(i + 1) * buf.act_dim);
      row["reward"] = buf.rewards[i];
      row["value"] = buf.values[i];
      row["terminated"] = buf.terminated[i] != 0;
      row["truncated"] = buf.truncated[i] != 0;
      row["advantage"] = buf.advantages[i];
      row["return"] = buf.returns[i];
      out << row.dump() << "\n";
    }
  }

  void write_summary(const std::string& path, const std::string& metrics_path) const {
    std::ifstream in(metrics_path);
    std::ofstream out(path);
    out << "batch,env_steps,eval_return_mean,eval_return_stderr,eval_success_rate\n";
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json row = nlohmann::json::parse(line);
      if (!row.contains("eval_return_mean")) continue;
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%lld,%lld,%.17g,%.17g,%.17g",
                    static_cast<long long>(row["batch"].get<int64_t>()),
                    static_cast<long long>(row["env_steps"].get<int64_t>()),
                    row["eval_return_mean"].get<double>(), row["eval_return_stderr"].get<double>(),
                    row["eval_success_rate"].get<double>());
      out << buf << "\n";
    }
  }

  RunConfig cfg_;
  Rng root_;
  Rng shuffle_rng_;
  VecEnv envs_;
  RunningNorm obs_norm_;
  double action_scale_ = 1.0;

  FlowPolicy flow_;
  GaussianPolicy gaussian_;
  ParamSet policy_params_;
  ParamSet value_params_;
  Mlp value_net_;
  AdamState policy_adam_;
  AdamState value_adam_;

  std::vector<Rng> noise_rngs_;
  std::vector<Rng> mc_rngs_;
  int64_t env_steps_ = 0;
};

// ---- checkpoint-driven entry points (CLI surface) --------------------------

// Rebuilds a policy/value pair from a checkpoint for evaluation or probing.
struct LoadedAgent {
  Checkpoint ckpt;
  ParamSet policy_params;
  ParamSet value_params;
  FlowPolicy flow;
  GaussianPolicy gaussian;
  Mlp value_net;
  RunningNorm norm;

  explicit LoadedAgent(const Checkpoint& c) : ckpt(c), norm(c.obs_dim) {
    if (c.kind == PolicyKind::kFlow) {
      FlowPolicyCfg pc;
      pc.hidden.assign(c.policy_sizes.begin() + 1, c.policy_sizes.end() - 1);
      pc.activation = c.activation;
      pc.time_embed_dim = c.time_embed_dim;
      pc.n_mc = c.n_mc;
      pc.schedule = Schedule{c.schedule, c.tau_min};
      pc.weighting = Weighting{c.weighting};
      pc.mc_param = c.mc_param;
      pc.sampler = c.sampler;
      flow = FlowPolicy(pc, c.obs_dim, c.act_dim, &policy_params);
    } else {
      GaussianPolicyCfg gc;
      gc.hidden.assign(c.policy_sizes.begin() + 1, c.policy_sizes.end() - 1);
      gc.activation = c.activation;
      gaussian = GaussianPolicy(gc, c.obs_dim, c.act_dim, c.action_scale, &policy_params);
    }
    if (policy_params.values.size() != c.policy_values.size()) {
      throw std::runtime_error("checkpoint parameter count mismatch");
    }
    policy_params.values = c.policy_values;
    policy_params.step = c.policy_step;

    if (!c.value_sizes.empty()) {
      value_net = Mlp(c.value_sizes, c.activation, &value_params, "value");
      value_params.values = c.value_values;
      value_params.step = c.value_step;
    }
    norm = ckpt.obs_norm();
  }

  void normalize_row(const std::vector<double>& raw, double* out) const {
    norm.normalize(std::span<const double>(raw.data(), raw.size()), std::span<double>(out, raw.size()));
  }
};

inline EvalSummary evaluate_checkpoint(const Checkpoint& ckpt, const std::string& env_key,
                                       int episodes, uint64_t seed, uint64_t salt = 0,
                                       const std::optional<SamplerCfg>& sampler_override = std::nullopt,
                                       const std::string& csv_path = "", bool from_probe_state = false) {
  if (env_key != ckpt.env_key) {
    throw std::runtime_error("checkpoint was trained on env '" + ckpt.env_key + "', not '" + env_key + "'");
  }
  EvalSummary out;
  out.episodes = episodes;
  if (episodes > 0) {
    LoadedAgent agent(ckpt);
    detail::PolicyView view;
    view.is_gaussian = ckpt.kind == PolicyKind::kGaussian;
    view.flow = &agent.flow;
    view.gaussian = &agent.gaussian;
    view.params = &agent.policy_params;
    view.norm = &agent.norm;
    view.normalize = ckpt.obs_norm_enabled;
    SamplerCfg sampler = ckpt.sampler;
    if (sampler_override) sampler = *sampler_override;
    out = detail::run_eval(view, env_key, episodes, Rng(seed).split(Stream::kEval, salt), sampler,
                           from_probe_state);
  }
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    csv << "episode,return,length,success\n";
    for (int e = 0; e < static_cast<int>(out.episode_returns.size()); ++e) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%d,%.17g,%d,%d", e, out.episode_returns[e],
                    out.episode_lengths[e], static_cast<int>(out.episode_success[e]));
      csv << buf << "\n";
    }
  }
  return out;
}

// Samples n actions at one state and reports the direction-mode structure.
// For flow policies the denoising trajectory is also recorded at the start,
// middle, and end of integration.
inline ModeReport probe_checkpoint(const Checkpoint& ckpt, const std::vector<double>& raw_state,
                                   int n_samples, uint64_t seed, const std::string& dump_dir = "") {
  if (static_cast<int>(raw_state.size()) != ckpt.obs_dim) {
    throw std::runtime_error("probe state dimension mismatch");
  }
  LoadedAgent agent(ckpt);
  Matrix obs(n_samples, ckpt.obs_dim);
  for (int i = 0; i < n_samples; ++i) agent.normalize_row(raw_state, obs.row_ptr(i));

  Rng probe_root = Rng(seed).split(Stream::kProbe);
  Matrix actions(n_samples, ckpt.act_dim);
  Matrix stage0, stage_mid, stage1;

  if (ckpt.kind == PolicyKind::kGaussian) {
    std::vector<Rng> streams;
    for (int i = 0; i < n_samples; ++i) streams.push_back(probe_root.split(Stream::kActionNoise, i));
    GaussianSampleBatch s = agent.gaussian.sample_actions(agent.policy_params, obs, streams.data());
    actions = s.actions;  // no denoising trace for a one-shot policy
  } else {
    SamplerCfg sampler = ckpt.sampler;
    if (sampler.method == SamplerMethod::kStochasticEuler) {
      sampler.method = SamplerMethod::kEuler;
      sampler.churn_std = 0.0;
    }
    Matrix noise(n_samples, ckpt.act_dim);
    std::vector<Rng> streams;
    for (int i = 0; i < n_samples; ++i) streams.push_back(probe_root.split(Stream::kActionNoise, i));
    for (int i = 0; i < n_samples; ++i)
      for (int j = 0; j < ckpt.act_dim; ++j) noise.at(i, j) = streams[i].normal();
    auto field = [&](const Matrix& x, double tau) {
      return agent.flow.velocity(agent.policy_params, obs, x, tau);
    };
    const int mid = sampler.n_steps / 2;
    auto observer = [&](int k, double, const Matrix& x) {
      if (k == 0) stage0 = x;
      if (k == mid) stage_mid = x;
      if (k == sampler.n_steps) stage1 = x;
    };
    actions = integrate(field, noise, sampler, streams.data(), observer);
  }

  ModeReport rep = detail::direction_modes(actions);

  if (!dump_dir.empty()) {
    std::filesystem::create_directories(dump_dir);
    std::ofstream samples(dump_dir + "/probe_samples.csv");
    samples << "sample";
    for (int j = 0; j < ckpt.act_dim; ++j) samples << ",a" << j;
    samples << "\n";
    for (int i = 0; i < n_samples; ++i) {
      samples << i;
      for (int j = 0; j < ckpt.act_dim; ++j) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), ",%.17g", actions.at(i, j));
        samples << buf;
      }
      samples << "\n";
    }
    std::ofstream trace(dump_dir + "/probe_denoise_trace.csv");
    trace << "sample,tau";
    for (int j = 0; j < ckpt.act_dim; ++j) trace << ",x" << j;
    trace << "\n";
    auto dump_stage = [&](const Matrix& m, double tau) {
      for (int i = 0; i < m.rows; ++i) {
        trace << i << "," << tau;
        for (int j = 0; j < m.cols; ++j) {
          char buf[64];
          std::snprintf(buf, sizeof(buf), ",%.17g", m.at(i, j));
          trace << buf;
        }
        trace << "\n";
      }
    };
    if (stage0.rows > 0) dump_stage(stage0, 0.0);
    if (stage_mid.rows > 0) dump_stage(stage_mid, 0.5);
    if (stage1.rows > 0) dump_stage(stage1, 1.0);
  }
  return rep;
}

// ---- sweep driver ----------------------------------------------------------

struct SweepCell {
  std::map<std::string, std::string> overrides;
  std::vector<double> terminal_returns;   // one per seed
  std::vector<double> terminal_success;   // one per seed
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::string csv_path;
};

inline const std::vector<std::string>& sweep_whitelist() {
  static const std::vector<std::string> keys = {
      "fpo.eps_clip", "update.learning_rate", "policy.n_mc", "dppo.sigma_t", "fpo.mc_param"};
  return keys;
}

// grid spec: "key=v1,v2;key2=w1,w2" over whitelisted keys only.
inline std::vector<std::map<std::string, std::string>> parse_grid(const std::string& grid) {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  std::istringstream ss(grid);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.empty()) continue;
    const size_t eq = part.find('=');
    if (eq == std::string::npos) throw std::runtime_error("grid: expected key=v1,v2 in '" + part + "'");
    const std::string key = part.substr(0, eq);
    const auto& wl = sweep_whitelist();
    if (std::find(wl.begin(), wl.end(), key) == wl.end()) {
      throw std::runtime_error("grid key not sweepable: " + key);
    }
    std::vector<std::string> vals;
    std::istringstream vs(part.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) {
      if (!v.empty()) vals.push_back(v);
    }
    if (vals.empty()) throw std::runtime_error("grid key has no values: " + key);
    axes.emplace_back(key, vals);
  }
  std::vector<std::map<std::string, std::string>> cells = {{}};
  for (const auto& [key, vals] : axes) {
    std::vector<std::map<std::string, std::string>> next;
    for (const auto& cell : cells) {
      for (const auto& v : vals) {
        auto c = cell;
        c[key] = v;
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

inline SweepResult run_sweep(const std::string& config_text, const std::string& grid, int seeds,
                             const std::string& out_dir) {
  SweepResult result;
  std::filesystem::create_directories(out_dir);
  const auto cells = parse_grid(grid);
  for (size_t ci = 0; ci < cells.size(); ++ci) {
    SweepCell cell;
    cell.overrides = cells[ci];
    for (int s = 0; s < seeds; ++s) {
      ConfigText text = ConfigText::parse(config_text);
      for (const auto& [k, v] : cells[ci]) text.set(k, v);
      text.set("run.seed", std::to_string(s));
      text.set("run.out_dir", out_dir + "/cell" + std::to_string(ci) + "_seed" + std::to_string(s));
      RunConfig rc = RunConfig::load(std::move(text));
      Trainer trainer(rc);
      TrainOutcome out = trainer.run();
      cell.terminal_returns.push_back(out.final_eval.return_mean);
      cell.terminal_success.push_back(out.final_eval.success_rate);
    }
    result.cells.push_back(std::move(cell));
  }

  result.csv_path = out_dir + "/sweep.csv";
  std::ofstream csv(result.csv_path);
  csv << "cell,overrides,seed,terminal_return,terminal_success,cell_return_mean,cell_return_stderr\n";
  for (size_t ci = 0; ci < result.cells.size(); ++ci) {
    const SweepCell& cell = result.cells[ci];
    std::string ov;
    for (const auto& [k, v] : cell.overrides) {
      if (!ov.empty()) ov += " ";
      ov += k + "=" + v;
    }
    const double m = detail::mean_of(cell.terminal_returns);
    const double se = detail::stderr_of(cell.terminal_returns);
    for (size_t s = 0; s < cell.terminal_returns.size(); ++s) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%zu,%s,%zu,%.17g,%.17g,%.17g,%.17g", ci, ov.c_str(), s,
                    cell.terminal_returns[s], cell.terminal_success[s], m, se);
      csv << buf << "\n";
    }
  }
  return result;
}

}  // namespace fpo
