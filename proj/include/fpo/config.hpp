#pragma once

#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpo/algo.hpp"
#include "fpo/cfm.hpp"
#include "fpo/env.hpp"
#include "fpo/rollout.hpp"
#include "fpo/sampler.hpp"
#include "fpo/schedule.hpp"

namespace fpo {

// Flat sectioned config text:
//   [section]
//   key = value        # comment
// Values are strings (optionally quoted), numbers, booleans, or integer
// lists like [32, 32]. Every key present in a file must be consumed by the
// loader; leftovers are an error.
class ConfigText {
 public:
  static ConfigText parse(const std::string& text) {
    ConfigText cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const size_t hash = line.find_first_of("#;");
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw std::runtime_error(err(lineno, "unterminated section header"));
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw std::runtime_error(err(lineno, "empty section name"));
        continue;
      }
      const size_t eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error(err(lineno, "expected key = value"));
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty() || value.empty()) throw std::runtime_error(err(lineno, "empty key or value"));
      const std::string full = section.empty() ? key : section + "." + key;
      if (cfg.values_.count(full)) throw std::runtime_error("duplicate config key: " + full);
      cfg.values_[full] = value;
    }
    return cfg;
  }

  static ConfigText parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string take_string(const std::string& key, const std::string& fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::string v = it->second;
    values_.erase(it);
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
    return v;
  }

  double take_double(const std::string& key, double fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string v = it->second;
    values_.erase(it);
    size_t pos = 0;
    double out = 0.0;
    try {
      out = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw std::runtime_error("config key " + key + ": expected a number, got '" + v + "'");
    }
    if (pos != v.size()) throw std::runtime_error("config key " + key + ": trailing characters in '" + v + "'");
    return out;
  }

  int64_t take_int(const std::string& key, int64_t fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string v = it->second;
    values_.erase(it);
    size_t pos = 0;
    int64_t out = 0;
    try {
      out = std::stoll(v, &pos);
    } catch (const std::exception&) {
      throw std::runtime_error("config key " + key + ": expected an integer, got '" + v + "'");
    }
    if (pos != v.size()) throw std::runtime_error("config key " + key + ": trailing characters in '" + v + "'");
    return out;
  }

  bool take_bool(const std::string& key, bool fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string v = it->second;
    values_.erase(it);
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::runtime_error("config key " + key + ": expected true or false, got '" + v + "'");
  }

  std::vector<int> take_int_list(const std::string& key, std::vector<int> fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::string v = it->second;
    values_.erase(it);
    if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
      throw std::runtime_error("config key " + key + ": expected a list like [32, 32]");
    }
    v = v.substr(1, v.size() - 2);
    std::vector<int> out;
    std::istringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      out.push_back(static_cast<int>(std::stoll(item)));
    }
    return out;
  }

  // Error out on anything the loader did not consume.
  void reject_leftovers() const {
    if (values_.empty()) return;
    std::string msg = "unknown config keys:";
    for (const auto& [k, v] : values_) msg += " " + k;
    throw std::runtime_error(msg);
  }

  // Apply a dotted-key override (used by the sweep driver).
  void set(const std::string& full_key, const std::string& value) { values_[full_key] = value; }

 private:
  static std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  static std::string err(int lineno, const std::string& what) {
    return "config line " + std::to_string(lineno) + ": " + what;
  }

  std::map<std::string, std::string> values_;
};

// Complete experiment definition. Defaults are tuned for the grid task;
// presets for the other environments adjust a handful of keys.
struct RunConfig {
  // [run]
  std::string env = "gridworld";
  std::string algo = "fpo";  // fpo | ppo_gaussian | dppo
  uint64_t seed = 0;
  int total_batches = 500;
  int num_envs = 128;
  int unroll_length = 25;
  int eval_every = 20;
  int eval_episodes = 64;
  double stop_success_rate = 0.0;  // > 0 stops once eval success reaches it
  std::string out_dir = "runs/out";
  bool debug_buffer_dump = false;

  // [policy]
  std::vector<int> policy_hidden{32, 32};
  std::string activation = "tanh";
  int time_embed_dim = 8;
  int n_mc = 8;

  // [value]
  std::vector<int> value_hidden{64, 64};

  // [schedule]
  std::string schedule = "ot_linear";
  double tau_min = 0.05;
  std::string mc_weighting = "uniform";

  // [sampler]
  std::string sampler_method = "euler";
  int sampler_steps = 10;
  double churn_std = 0.05;

  // [gae]
  double gamma = 0.98;
  double gae_lambda = 0.95;
  double reward_scale = 1.0;

  // [norm]
  bool normalize_observations = true;
  std::string advantage_mode = "zscore";
  double shift_floor = 0.0;

  // [update]
  double learning_rate = 3e-4;
  int epochs = 4;
  int minibatches = 8;
  double value_coef = 0.25;
  double value_clip = 0.2;
  double entropy_coef = 0.01;
  double max_grad_norm = 0.0;
  double ratio_log_clamp = 20.0;
  bool debug_recompute_old = false;

  // [fpo]
  double fpo_eps_clip = 0.05;
  std::string mc_param = "eps_mse";

  // [ppo]
  double ppo_eps_clip = 0.1;

  // [dppo]
  double dppo_eps_clip = 0.2;
  double sigma_t = 0.05;

  static RunConfig defaults_for(const std::string& env_key, const std::string& algo_key) {
    RunConfig c;
    c.env = env_key;
    c.algo = algo_key;
    if (env_key == "pointmass2") {
      c.unroll_length = 24;
      c.total_batches = 150;
      c.gamma = 0.99;
      c.reward_scale = 10.0;
      c.eval_every = 10;
    } else if (env_key == "pendulum") {
      c.unroll_length = 30;
      c.total_batches = 150;
      c.gamma = 0.99;
      c.reward_scale = 0.1;
      c.eval_every = 10;
    }
    if (algo_key == "dppo") {
      c.sampler_method = "stochastic_euler";
    }
    return c;
  }

  static RunConfig load(ConfigText cfg) {
    RunConfig base = defaults_for(cfg.take_string("run.env", "gridworld"),
                                  cfg.take_string("run.algo", "fpo"));
    RunConfig c = base;
    c.seed = static_cast<uint64_t>(cfg.take_int("run.seed", static_cast<int64_t>(base.seed)));
    c.total_batches = static_cast<int>(cfg.take_int("run.total_batches", base.total_batches));
    c.num_envs = static_cast<int>(cfg.take_int("run.num_envs", base.num_envs));
    c.unroll_length = static_cast<int>(cfg.take_int("run.unroll_length", base.unroll_length));
    c.eval_every = static_cast<int>(cfg.take_int("run.eval_every", base.eval_every));
    c.eval_episodes = static_cast<int>(cfg.take_int("run.eval_episodes", base.eval_episodes));
    c.stop_success_rate = cfg.take_double("run.stop_success_rate", base.stop_success_rate);
    c.out_dir = cfg.take_string("run.out_dir", base.out_dir);
    c.debug_buffer_dump = cfg.take_bool("run.debug_buffer_dump", base.debug_buffer_dump);

    c.policy_hidden = cfg.take_int_list("policy.hidden", base.policy_hidden);
    c.activation = cfg.take_string("policy.activation", base.activation);
    c.time_embed_dim = static_cast<int>(cfg.take_int("policy.time_embed_dim", base.time_embed_dim));
    c.n_mc = static_cast<int>(cfg.take_int("policy.n_mc", base.n_mc));

    c.value_hidden = cfg.take_int_list("value.hidden", base.value_hidden);

    c.schedule = cfg.take_string("schedule.schedule", base.schedule);
    c.tau_min = cfg.take_double("schedule.tau_min", base.tau_min);
    c.mc_weighting = cfg.take_string("schedule.mc_weighting", base.mc_weighting);

    c.sampler_method = cfg.take_string("sampler.method", base.sampler_method);
    c.sampler_steps = static_cast<int>(cfg.take_int("sampler.n_steps", base.sampler_steps));
    c.churn_std = cfg.take_double("sampler.churn_std", base.churn_std);

    c.gamma = cfg.take_double("gae.gamma", base.gamma);
    c.gae_lambda = cfg.take_double("gae.lambda", base.gae_lambda);
    c.reward_scale = cfg.take_double("gae.reward_scale", base.reward_scale);

    c.normalize_observations = cfg.take_bool("norm.normalize_observations", base.normalize_observations);
    c.advantage_mode = cfg.take_string("norm.advantage_mode", base.advantage_mode);
    c.shift_floor = cfg.take_double("norm.shift_floor", base.shift_floor);

    c.learning_rate = cfg.take_double("update.learning_rate", base.learning_rate);
    c.epochs = static_cast<int>(cfg.take_int("update.epochs", base.epochs));
    c.minibatches = static_cast<int>(cfg.take_int("update.minibatches", base.minibatches));
    c.value_coef = cfg.take_double("update.value_coef", base.value_coef);
    c.value_clip = cfg.take_double("update.value_clip", base.value_clip);
    c.entropy_coef = cfg.take_double("update.entropy_coef", base.entropy_coef);
    c.max_grad_norm = cfg.take_double("update.max_grad_norm", base.max_grad_norm);
    c.ratio_log_clamp = cfg.take_double("update.ratio_log_clamp", base.ratio_log_clamp);
    c.debug_recompute_old = cfg.take_bool("update.debug_recompute_old", base.debug_recompute_old);

    c.fpo_eps_clip = cfg.take_double("fpo.eps_clip", base.fpo_eps_clip);
    c.mc_param = cfg.take_string("fpo.mc_param", base.mc_param);

    c.ppo_eps_clip = cfg.take_double("ppo.eps_clip", base.ppo_eps_clip);

    c.dppo_eps_clip = cfg.take_double("dppo.eps_clip", base.dppo_eps_clip);
    c.sigma_t = cfg.take_double("dppo.sigma_t", base.sigma_t);

    cfg.reject_leftovers();
    c.validate();
    return c;
  }

  static RunConfig load_file(const std::string& path) { return load(ConfigText::parse_file(path)); }

  void validate() const {
    if (algo != "fpo" && algo != "ppo_gaussian" && algo != "dppo") {
      throw std::runtime_error("unknown algo: " + algo);
    }
    make_env(env);  // throws on unknown keys
    schedule_from_name(schedule);
    weighting_from_name(mc_weighting);
    sampler_from_name(sampler_method);
    mc_param_from_name(mc_param);
    activation_from_name(activation);
    advantage_mode_from_name(advantage_mode);
    if (total_batches < 0) throw std::runtime_error("run.total_batches must be >= 0");
    if (num_envs < 1) throw std::runtime_error("run.num_envs must be >= 1");
    if (unroll_length < 1) throw std::runtime_error("run.unroll_length must be >= 1");
    if (n_mc < 1) throw std::runtime_error("policy.n_mc must be >= 1");
    if (sampler_steps < 1) throw std::runtime_error("sampler.n_steps must be >= 1");
    if (tau_min <= 0.0 || tau_min >= 0.5) throw std::runtime_error("schedule.tau_min must lie in (0, 0.5)");
    if (gamma < 0.0 || gamma > 1.0) throw std::runtime_error("gae.gamma must lie in [0, 1]");
    if (gae_lambda < 0.0 || gae_lambda > 1.0) throw std::runtime_error("gae.lambda must lie in [0, 1]");
    if (fpo_eps_clip <= 0.0) throw std::runtime_error("fpo.eps_clip must be > 0");
    if (ppo_eps_clip <= 0.0) throw std::runtime_error("ppo.eps_clip must be > 0");
    if (dppo_eps_clip <= 0.0) throw std::runtime_error("dppo.eps_clip must be > 0");
    if (algo == "dppo") {
      if (sigma_t <= 0.0) throw std::runtime_error("dppo.sigma_t must be > 0");
      if (sampler_method != "stochastic_euler") {
        throw std::runtime_error("dppo requires sampler.method = stochastic_euler");
      }
    }
    if (epochs < 0) throw std::runtime_error("update.epochs must be >= 0");
    if (minibatches < 1) throw std::runtime_error("update.minibatches must be >= 1");
    if (learning_rate <= 0.0) throw std::runtime_error("update.learning_rate must be > 0");
  }

  // Typed views used by the trainer.
  Schedule schedule_cfg() const { return Schedule{schedule_from_name(schedule), tau_min}; }
  Weighting weighting_cfg() const { return Weighting{weighting_from_name(mc_weighting)}; }

  SamplerCfg sampler_cfg() const {
    SamplerCfg s;
    s.method = sampler_from_name(sampler_method);
    s.n_steps = sampler_steps;
    s.churn_std = algo == "dppo" ? sigma_t : churn_std;
    return s;
  }

  FlowPolicyCfg flow_policy_cfg() const {
    FlowPolicyCfg p;
    p.hidden = policy_hidden;
    p.activation = activation_from_name(activation);
    p.time_embed_dim = time_embed_dim;
    p.n_mc = n_mc;
    p.schedule = schedule_cfg();
    p.weighting = weighting_cfg();
    p.mc_param = mc_param_from_name(mc_param);
    p.sampler = sampler_cfg();
    return p;
  }

  GaeCfg gae_cfg() const { return GaeCfg{gamma, gae_lambda, reward_scale}; }

  UpdateCfg update_cfg() const {
    UpdateCfg u;
    u.epochs = epochs;
    u.minibatches = minibatches;
    u.value_coef = value_coef;
    u.value_clip = value_clip;
    u.max_grad_norm = max_grad_norm;
    u.adv_mode = advantage_mode_from_name(advantage_mode);
    u.shift_floor = shift_floor;
    u.debug_recompute_old = debug_recompute_old;
    return u;
  }

  std::string to_text() const {
    std::ostringstream o;
    o << "[run]\n";
    o << "env = \"" << env << "\"\n";
    o << "algo = \"" << algo << "\"\n";
    o << "seed = " << seed << "\n";
    o << "total_batches = " << total_batches << "\n";
    o << "num_envs = " << num_envs << "\n";
    o << "unroll_length = " << unroll_length << "\n";
    o << "eval_every = " << eval_every << "\n";
    o << "eval_episodes = " << eval_episodes << "\n";
    o << "stop_success_rate = " << fmt(stop_success_rate) << "\n";
    o << "out_dir = \"" << out_dir << "\"\n";
    o << "debug_buffer_dump = " << (debug_buffer_dump ? "true" : "false") << "\n";
    o << "\n[policy]\n";
    o << "hidden = " << fmt(policy_hidden) << "\n";
    o << "activation = \"" << activation << "\"\n";
    o << "time_embed_dim = " << time_embed_dim << "\n";
    o << "n_mc = " << n_mc << "\n";
    o << "\n[value]\n";
    o << "hidden = " << fmt(value_hidden) << "\n";
    o << "\n[schedule]\n";
    o << "schedule = \"" << schedule << "\"\n";
    o << "tau_min = " << fmt(tau_min) << "\n";
    o << "mc_weighting = \"" << mc_weighting << "\"\n";
    o << "\n[sampler]\n";
    o << "method = \"" << sampler_method << "\"\n";
    o << "n_steps = " << sampler_steps << "\n";
    o << "churn_std = " << fmt(churn_std) << "\n";
    o << "\n[gae]\n";
    o << "gamma = " << fmt(gamma) << "\n";
    o << "lambda = " << fmt(gae_lambda) << "\n";
    o << "reward_scale = " << fmt(reward_scale) << "\n";
    o << "\n[norm]\n";
    o << "normalize_observations = " << (normalize_observations ? "true" : "false") << "\n";
    o << "advantage_mode = \"" << advantage_mode << "\"\n";
    o << "shift_floor = " << fmt(shift_floor) << "\n";
    o << "\n[update]\n";
    o << "learning_rate = " << fmt(learning_rate) << "\n";
    o << "epochs = " << epochs << "\n";
    o << "minibatches = " << minibatches << "\n";
    o << "value_coef = " << fmt(value_coef) << "\n";
    o << "value_clip = " << fmt(value_clip) << "\n";
    o << "entropy_coef = " << fmt(entropy_coef) << "\n";
    o << "max_grad_norm = " << fmt(max_grad_norm) << "\n";
    o << "ratio_log_clamp = " << fmt(ratio_log_clamp) << "\n";
    o << "debug_recompute_old = " << (debug_recompute_old ? "true" : "false") << "\n";
    o << "\n[fpo]\n";
    o << "eps_clip = " << fmt(fpo_eps_clip) << "\n";
    o << "mc_param = \"" << mc_param << "\"\n";
    o << "\n[ppo]\n";
    o << "eps_clip = " << fmt(ppo_eps_clip) << "\n";
    o << "\n[dppo]\n";
    o << "eps_clip = " << fmt(dppo_eps_clip) << "\n";
    o << "sigma_t = " << fmt(sigma_t) << "\n";
    return o.str();
  }

 private:
  static std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
  }

  static std::string fmt(const std::vector<int>& v) {
    std::string s = "[";
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) s += ", ";
      s += std::to_string(v[i]);
    }
    return s + "]";
  }
};

}  // namespace fpo
