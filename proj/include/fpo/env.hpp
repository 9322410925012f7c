#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpo/rng.hpp"

namespace fpo {

struct EnvSpec {
  int obs_dim = 0;
  int act_dim = 0;
  double action_low = -1.0;
  double action_high = 1.0;
  int max_steps = 200;
};

struct StepResult {
  double reward = 0.0;
  bool terminated = false;  // true MDP termination
  bool truncated = false;   // time-limit cutoff; value bootstrapping applies
};

class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual void reset(Rng& rng, std::vector<double>* obs) = 0;
  virtual StepResult step(std::span<const double> action, Rng& rng, std::vector<double>* obs_next) = 0;
  // Episode-level success predicate used by evaluation summaries.
  virtual bool is_success(double episode_return) const { return episode_return > 0.0; }
  // Fixed probe start for evaluation; defaults to a reset draw.
  virtual void reset_to_probe_state(std::vector<double>* obs) {
    throw std::runtime_error("env has no probe state");
  }
};

// 25x25 grid with continuous position. Two goal bands sit at the middle of
// the top and bottom edges (3 cells wide, 1 cell tall). The reward is
// sparse: +1 on entering a goal cell, -1 on hitting the step limit,
// 0 otherwise, so every episode return is exactly +1 or -1. Moves are
// clipped to unit Euclidean length and positions clipped at the walls.
class GridWorldEnv : public Env {
 public:
  static constexpr double kSize = 25.0;
  static constexpr int kGoalColLo = 11;  // cells 11..13 inclusive
  static constexpr int kGoalColHi = 13;

  GridWorldEnv() {
    spec_.obs_dim = 2;
    spec_.act_dim = 2;
    spec_.action_low = -1.0;
    spec_.action_high = 1.0;
    spec_.max_steps = 200;
  }

  const EnvSpec& spec() const override { return spec_; }

  static bool in_goal(double x, double y) {
    const int cx = cell_index(x);
    const int cy = cell_index(y);
    if (cx < kGoalColLo || cx > kGoalColHi) return false;
    return cy == 0 || cy == 24;
  }

  // The state equidistant from both goal bands: the grid midpoint.
  static std::vector<double> saddle_state() { return {kSize / 2.0, kSize / 2.0}; }

  void reset(Rng& rng, std::vector<double>* obs) override {
    do {
      x_ = rng.uniform(0.0, kSize);
      y_ = rng.uniform(0.0, kSize);
    } while (in_goal(x_, y_));
    steps_ = 0;
    write_obs(obs);
  }

  void reset_to_probe_state(std::vector<double>* obs) override {
    const auto s = saddle_state();
    x_ = s[0];
    y_ = s[1];
    steps_ = 0;
    write_obs(obs);
  }

  void set_state(double x, double y) {
    x_ = x;
    y_ = y;
    steps_ = 0;
  }

  StepResult step(std::span<const double> action, Rng&, std::vector<double>* obs_next) override {
    double ax = action[0];
    double ay = action[1];
    const double norm = std::sqrt(ax * ax + ay * ay);
    if (norm > 1.0) {
      ax /= norm;
      ay /= norm;
    }
    x_ = clip_pos(x_ + ax);
    y_ = clip_pos(y_ + ay);
    steps_ += 1;

    StepResult r;
    if (in_goal(x_, y_)) {
      r.reward = 1.0;
      r.terminated = true;
    } else if (steps_ >= spec_.max_steps) {
      // The timeout penalty is part of the MDP, so this is a termination,
      // not a truncation.
      r.reward = -1.0;
      r.terminated = true;
    }
    write_obs(obs_next);
    return r;
  }

 private:
  static int cell_index(double p) {
    int c = static_cast<int>(std::floor(p));
    if (c < 0) c = 0;
    if (c > 24) c = 24;
    return c;
  }

  static double clip_pos(double p) { return p < 0.0 ? 0.0 : (p > kSize ? kSize : p); }

  void write_obs(std::vector<double>* obs) const {
    obs->assign({x_, y_});
  }

  EnvSpec spec_;
  double x_ = 0.0;
  double y_ = 0.0;
  int steps_ = 0;
};

// Planar double integrator with two symmetric goals on the y-axis. Sparse
// +1 for reaching either goal, small quadratic action cost, snug time
// limit. Starts are uniform over the goal-free arena; the origin sits
// exactly between the goals, so a policy evaluated there has to commit to
// one side immediately or run out of time.
class PointMass2Env : public Env {
 public:
  static constexpr double kGoalY = 1.0;
  static constexpr double kGoalRadius = 0.3;
  static constexpr double kDt = 0.1;
  static constexpr double kDrag = 0.1;
  static constexpr double kStartBox = 0.9;

  PointMass2Env() {
    spec_.obs_dim = 4;
    spec_.act_dim = 2;
    spec_.action_low = -1.0;
    spec_.action_high = 1.0;
    spec_.max_steps = 30;
  }

  const EnvSpec& spec() const override { return spec_; }

  void reset(Rng& rng, std::vector<double>* obs) override {
    do {
      px_ = rng.uniform(-kStartBox, kStartBox);
      py_ = rng.uniform(-kStartBox, kStartBox);
    } while (at_goal());
    vx_ = vy_ = 0.0;
    steps_ = 0;
    write_obs(obs);
  }

  void reset_to_probe_state(std::vector<double>* obs) override {
    px_ = py_ = vx_ = vy_ = 0.0;
    steps_ = 0;
    write_obs(obs);
  }

  void set_state(double px, double py, double vx, double vy) {
    px_ = px;
    py_ = py;
    vx_ = vx;
    vy_ = vy;
    steps_ = 0;
  }

  bool at_goal() const {
    const double d_top = std::hypot(px_, py_ - kGoalY);
    const double d_bot = std::hypot(px_, py_ + kGoalY);
    return d_top < kGoalRadius || d_bot < kGoalRadius;
  }

  StepResult step(std::span<const double> action, Rng&, std::vector<double>* obs_next) override {
    const double ax = clip(action[0]);
    const double ay = clip(action[1]);
    vx_ += kDt * (ax - kDrag * vx_);
    vy_ += kDt * (ay - kDrag * vy_);
    px_ += kDt * vx_;
    py_ += kDt * vy_;
    steps_ += 1;

    StepResult r;
    r.reward = -0.001 * (ax * ax + ay * ay);
    if (at_goal()) {
      r.reward += 1.0;
      r.terminated = true;
    } else if (steps_ >= spec_.max_steps) {
      r.truncated = true;
    }
    write_obs(obs_next);
    return r;
  }

  bool is_success(double episode_return) const override { return episode_return > 0.5; }

 private:
  static double clip(double a) { return a < -1.0 ? -1.0 : (a > 1.0 ? 1.0 : a); }

  void write_obs(std::vector<double>* obs) const { obs->assign({px_, py_, vx_, vy_}); }

  EnvSpec spec_;
  double px_ = 0.0, py_ = 0.0, vx_ = 0.0, vy_ = 0.0;
  int steps_ = 0;
};

// Torque-limited pendulum swing-up. theta = 0 is upright and wrapped to
// (-pi, pi]; the dense cost is -(theta^2 + 0.1 omega^2 + 0.001 a^2) per
// step. Semi-implicit Euler at dt = 0.05, internally substepped for energy
// behavior.
class PendulumEnv : public Env {
 public:
  static constexpr double kDt = 0.05;
  static constexpr double kGravity = 10.0;
  static constexpr double kLength = 1.0;
  static constexpr double kMaxTorque = 2.0;
  static constexpr int kSubsteps = 20;

  PendulumEnv() {
    spec_.obs_dim = 3;
    spec_.act_dim = 1;
    spec_.action_low = -kMaxTorque;
    spec_.action_high = kMaxTorque;
    spec_.max_steps = 200;
  }

  const EnvSpec& spec() const override { return spec_; }

  void reset(Rng& rng, std::vector<double>* obs) override {
    theta_ = rng.uniform(-3.141592653589793, 3.141592653589793);
    omega_ = rng.uniform(-1.0, 1.0);
    steps_ = 0;
    write_obs(obs);
  }

  void reset_to_probe_state(std::vector<double>* obs) override {
    theta_ = 3.141592653589793;  // hanging straight down
    omega_ = 0.0;
    steps_ = 0;
    write_obs(obs);
  }

  void set_state(double theta, double omega) {
    theta_ = theta;
    omega_ = omega;
    steps_ = 0;
  }

  double theta() const { return theta_; }
  double omega() const { return omega_; }

  // Kinetic + potential energy of the undriven pendulum (m = 1).
  double energy() const {
    return 0.5 * kLength * kLength * omega_ * omega_ + kGravity * kLength * std::cos(theta_);
  }

  void integrate_free(double torque, int env_steps) {
    for (int s = 0; s < env_steps; ++s) advance(torque);
  }

  StepResult step(std::span<const double> action, Rng&, std::vector<double>* obs_next) override {
    double a = action[0];
    if (a < -kMaxTorque) a = -kMaxTorque;
    if (a > kMaxTorque) a = kMaxTorque;

    StepResult r;
    r.reward = -(theta_ * theta_ + 0.1 * omega_ * omega_ + 0.001 * a * a);
    advance(a);
    steps_ += 1;
    if (steps_ >= spec_.max_steps) r.truncated = true;
    write_obs(obs_next);
    return r;
  }

  bool is_success(double episode_return) const override { return episode_return > -200.0; }

 private:
  void advance(double torque) {
    const double h = kDt / kSubsteps;
    for (int s = 0; s < kSubsteps; ++s) {
      omega_ += h * ((kGravity / kLength) * std::sin(theta_) + torque / (kLength * kLength));
      theta_ += h * omega_;
    }
    theta_ = wrap_angle(theta_);
  }

  // Wrap to (-pi, pi].
  static double wrap_angle(double t) {
    const double pi = 3.141592653589793;
    t = std::fmod(t + pi, 2.0 * pi);
    if (t < 0) t += 2.0 * pi;
    t -= pi;
    return t == -pi ? pi : t;
  }

  void write_obs(std::vector<double>* obs) const {
    obs->assign({std::cos(theta_), std::sin(theta_), omega_});
  }

  EnvSpec spec_;
  double theta_ = 0.0;
  double omega_ = 0.0;
  int steps_ = 0;
};

inline std::unique_ptr<Env> make_env(const std::string& key) {
  if (key == "gridworld") return std::make_unique<GridWorldEnv>();
  if (key == "pointmass2") return std::make_unique<PointMass2Env>();
  if (key == "pendulum") return std::make_unique<PendulumEnv>();
  throw std::invalid_argument("unknown env: " + key);
}

// Batch of independent environments with per-env streams and auto-reset.
// When an episode ends the returned observation is the fresh start state;
// the pre-reset observation is kept for bootstrapping.
class VecEnv {
 public:
  VecEnv(const std::string& key, int num_envs, const std::vector<uint64_t>& seeds) : key_(key) {
    if (static_cast<int>(seeds.size()) != num_envs) throw std::invalid_argument("VecEnv: seed count mismatch");
    for (int i = 0; i < num_envs; ++i) {
      envs_.push_back(make_env(key));
      Rng root(seeds[i]);
      reset_rngs_.push_back(root.split(Stream::kEnvReset));
      dyn_rngs_.push_back(root.split(Stream::kEnvDynamics));
    }
    obs_.assign(num_envs, std::vector<double>(envs_[0]->spec().obs_dim, 0.0));
  }

  int size() const { return static_cast<int>(envs_.size()); }
  const EnvSpec& spec() const { return envs_[0]->spec(); }
  const std::string& key() const { return key_; }
  Env& env(int i) { return *envs_[i]; }

  void reset_all() {
    for (int i = 0; i < size(); ++i) envs_[i]->reset(reset_rngs_[i], &obs_[i]);
  }

  void reset_all_to_probe_state() {
    for (int i = 0; i < size(); ++i) envs_[i]->reset_to_probe_state(&obs_[i]);
  }

  const std::vector<double>& observation(int i) const { return obs_[i]; }

  struct BatchStep {
    std::vector<double> rewards;
    std::vector<uint8_t> terminated;
    std::vector<uint8_t> truncated;
    // Pre-reset next observation (valid for ended episodes; equal to the
    // live observation otherwise).
    std::vector<std::vector<double>> final_obs;
  };

  // actions: num_envs x act_dim, row-major.
  BatchStep step(const std::vector<double>& actions) {
    const int n = size();
    const int ad = spec().act_dim;
    if (static_cast<int>(actions.size()) != n * ad) throw std::invalid_argument("VecEnv::step: batch size mismatch");
    BatchStep out;
    out.rewards.resize(n);
    out.terminated.assign(n, 0);
    out.truncated.assign(n, 0);
    out.final_obs.resize(n);
    for (int i = 0; i < n; ++i) {
      std::span<const double> a(actions.data() + static_cast<size_t>(i) * ad, ad);
      StepResult r = envs_[i]->step(a, dyn_rngs_[i], &obs_[i]);
      out.rewards[i] = r.reward;
      out.terminated[i] = r.terminated ? 1 : 0;
      out.truncated[i] = r.truncated ? 1 : 0;
      out.final_obs[i] = obs_[i];
      if (r.terminated || r.truncated) {
        envs_[i]->reset(reset_rngs_[i], &obs_[i]);
      }
    }
    return out;
  }

 private:
  std::string key_;
  std::vector<std::unique_ptr<Env>> envs_;
  std::vector<Rng> reset_rngs_;
  std::vector<Rng> dyn_rngs_;
  std::vector<std::vector<double>> obs_;
};

}  // namespace fpo
