#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fpo/cfm.hpp"
#include "fpo/mlp.hpp"
#include "fpo/rollout.hpp"
#include "fpo/sampler.hpp"
#include "fpo/schedule.hpp"

namespace fpo {

enum class PolicyKind : uint8_t { kFlow = 0, kGaussian = 1 };

// Self-describing binary snapshot of a trained agent: enough to rebuild
// the policy (and value head) and evaluate without the original config.
// Doubles are stored raw, so a reloaded network reproduces outputs
// bit-exactly.
struct Checkpoint {
  static constexpr char kMagic[8] = {'F', 'P', 'O', 'C', 'K', 'P', 'T', '1'};

  PolicyKind kind = PolicyKind::kFlow;
  std::string env_key;
  int obs_dim = 0;
  int act_dim = 0;
  double action_scale = 1.0;

  // flow settings
  ScheduleKind schedule = ScheduleKind::kOtLinear;
  double tau_min = 1e-3;
  WeightingKind weighting = WeightingKind::kUniform;
  McParam mc_param = McParam::kEpsMse;
  SamplerCfg sampler;
  int n_mc = 8;
  int time_embed_dim = 8;

  Activation activation = Activation::kTanh;
  std::vector<int> policy_sizes;  // full layer sizes including in/out
  std::vector<int> value_sizes;

  bool obs_norm_enabled = true;
  int64_t obs_norm_count = 0;
  std::vector<double> obs_norm_mean;
  std::vector<double> obs_norm_m2;

  std::vector<double> policy_values;
  std::vector<double> value_values;
  int64_t policy_step = 0;
  int64_t value_step = 0;

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_u8(out, static_cast<uint8_t>(kind));
    write_string(out, env_key);
    write_i64(out, obs_dim);
    write_i64(out, act_dim);
    write_f64(out, action_scale);
    write_u8(out, static_cast<uint8_t>(schedule));
    write_f64(out, tau_min);
    write_u8(out, static_cast<uint8_t>(weighting));
    write_u8(out, static_cast<uint8_t>(mc_param));
    write_u8(out, static_cast<uint8_t>(sampler.method));
    write_i64(out, sampler.n_steps);
    write_f64(out, sampler.churn_std);
    write_i64(out, n_mc);
    write_i64(out, time_embed_dim);
    write_u8(out, static_cast<uint8_t>(activation));
    write_int_list(out, policy_sizes);
    write_int_list(out, value_sizes);
    write_u8(out, obs_norm_enabled ? 1 : 0);
    write_i64(out, obs_norm_count);
    write_f64_list(out, obs_norm_mean);
    write_f64_list(out, obs_norm_m2);
    write_f64_list(out, policy_values);
    write_f64_list(out, value_values);
    write_i64(out, policy_step);
    write_i64(out, value_step);
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
      throw std::runtime_error("not a checkpoint file: " + path);
    }
    Checkpoint c;
    c.kind = static_cast<PolicyKind>(read_u8(in));
    c.env_key = read_string(in);
    c.obs_dim = static_cast<int>(read_i64(in));
    c.act_dim = static_cast<int>(read_i64(in));
    c.action_scale = read_f64(in);
    c.schedule = static_cast<ScheduleKind>(read_u8(in));
    c.tau_min = read_f64(in);
    c.weighting = static_cast<WeightingKind>(read_u8(in));
    c.mc_param = static_cast<McParam>(read_u8(in));
    c.sampler.method = static_cast<SamplerMethod>(read_u8(in));
    c.sampler.n_steps = static_cast<int>(read_i64(in));
    c.sampler.churn_std = read_f64(in);
    c.n_mc = static_cast<int>(read_i64(in));
    c.time_embed_dim = static_cast<int>(read_i64(in));
    c.activation = static_cast<Activation>(read_u8(in));
    c.policy_sizes = read_int_list(in);
    c.value_sizes = read_int_list(in);
    c.obs_norm_enabled = read_u8(in) != 0;
    c.obs_norm_count = read_i64(in);
    c.obs_norm_mean = read_f64_list(in);
    c.obs_norm_m2 = read_f64_list(in);
    c.policy_values = read_f64_list(in);
    c.value_values = read_f64_list(in);
    c.policy_step = read_i64(in);
    c.value_step = read_i64(in);
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return c;
  }

  RunningNorm obs_norm() const {
    RunningNorm norm(obs_dim);
    if (!obs_norm_mean.empty()) norm.load(obs_norm_count, obs_norm_mean, obs_norm_m2);
    return norm;
  }

 private:
  static void write_u8(std::ofstream& o, uint8_t v) { o.write(reinterpret_cast<const char*>(&v), 1); }
  static void write_i64(std::ofstream& o, int64_t v) { o.write(reinterpret_cast<const char*>(&v), 8); }
  static void write_f64(std::ofstream& o, double v) { o.write(reinterpret_cast<const char*>(&v), 8); }

  static void write_string(std::ofstream& o, const std::string& s) {
    write_i64(o, static_cast<int64_t>(s.size()));
    o.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  static void write_int_list(std::ofstream& o, const std::vector<int>& v) {
    write_i64(o, static_cast<int64_t>(v.size()));
    for (int x : v) write_i64(o, x);
  }

  static void write_f64_list(std::ofstream& o, const std::vector<double>& v) {
    write_i64(o, static_cast<int64_t>(v.size()));
    o.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
  }

  static uint8_t read_u8(std::ifstream& i) {
    uint8_t v = 0;
    i.read(reinterpret_cast<char*>(&v), 1);
    return v;
  }

  static int64_t read_i64(std::ifstream& i) {
    int64_t v = 0;
    i.read(reinterpret_cast<char*>(&v), 8);
    return v;
  }

  static double read_f64(std::ifstream& i) {
    double v = 0;
    i.read(reinterpret_cast<char*>(&v), 8);
    return v;
  }

  static std::string read_string(std::ifstream& i) {
    const int64_t n = read_i64(i);
    if (n < 0 || n > 4096) throw std::runtime_error("corrupt checkpoint string");
    std::string s(static_cast<size_t>(n), '\0');
    i.read(s.data(), n);
    return s;
  }

  static std::vector<int> read_int_list(std::ifstream& i) {
    const int64_t n = read_i64(i);
    if (n < 0 || n > 1 << 20) throw std::runtime_error("corrupt checkpoint list");
    std::vector<int> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<int>(read_i64(i));
    return v;
  }

  static std::vector<double> read_f64_list(std::ifstream& i) {
    const int64_t n = read_i64(i);
    if (n < 0 || n > 1 << 28) throw std::runtime_error("corrupt checkpoint list");
    std::vector<double> v(static_cast<size_t>(n));
    i.read(reinterpret_cast<char*>(v.data()), n * 8);
    return v;
  }
};

}  // namespace fpo
