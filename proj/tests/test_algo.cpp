#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "fpo/algo.hpp"
#include "fpo/policy.hpp"
#include "fpo/rng.hpp"
#include "fpo/rollout.hpp"

using namespace fpo;

namespace {

std::vector<Rng> make_streams(int n, uint64_t base) {
  std::vector<Rng> out;
  for (int i = 0; i < n; ++i) out.emplace_back(Rng(base).split(Stream::kActionNoise, i));
  return out;
}

struct FlowSetup {
  ParamSet policy_params;
  ParamSet value_params;
  FlowPolicy policy;
  Mlp value_net;
  AdamState policy_adam;
  AdamState value_adam;

  FlowSetup(FlowPolicyCfg cfg, int obs_dim, int act_dim, uint64_t seed, double lr = 3e-4)
      : policy(cfg, obs_dim, act_dim, &policy_params),
        value_net({obs_dim, 16, 1}, Activation::kTanh, &value_params, "value") {
    Rng rng(seed);
    policy.init_params(&policy_params, rng);
    value_net.init_params(&value_params, rng, 1.0);
    policy_adam = AdamState(policy_params.values.size(), lr);
    value_adam = AdamState(value_params.values.size(), lr);
  }

  // Collects a small on-policy buffer with constant rewards supplied by fn.
  RolloutBuffer collect(int n, double (*reward_fn)(int), uint64_t stream_base) {
    const int od = policy.obs_dim();
    const int ad = policy.act_dim();
    RolloutBuffer buf;
    buf.allocate(n, 1, od, ad, policy.cfg().n_mc, 0);
    Matrix obs(n, od);
    Rng orng(stream_base);
    for (double& v : obs.data) v = orng.normal();
    auto noise = make_streams(n, stream_base + 1);
    auto mc = make_streams(n, stream_base + 2);
    FlowSampleBatch sample = policy.sample_actions(policy_params, obs, noise.data(), mc.data());
    buf.obs = obs.data;
    buf.actions = sample.actions.data;
    buf.mc_tau = sample.mc_tau.data;
    buf.mc_eps = sample.mc_eps.data;
    buf.mc_loss_old = sample.mc_loss_old.data;
    Matrix values = value_net.forward_values(value_params, obs);
    buf.values = values.data;
    for (int i = 0; i < n; ++i) {
      buf.rewards[i] = reward_fn(i);
      buf.terminated[i] = 1;
    }
    buf.compute_advantages(GaeCfg{0.99, 0.95, 1.0});
    return buf;
  }
};

}  // namespace

TEST_CASE("ratio proxy from loss means", "[algo]") {
  CHECK(fpo_ratio(1.7, 1.7) == 1.0);
  CHECK(fpo_ratio(1.5, 2.0) == Catch::Approx(std::exp(0.5)).margin(1e-12));
  // mean first, exponentiate second
  const double old_mean = (1.0 + 2.0) / 2.0;
  const double new_mean = (1.0 + 1.0) / 2.0;
  CHECK(fpo_ratio(new_mean, old_mean) == Catch::Approx(std::exp(0.5)).margin(1e-12));
  CHECK_THROWS(fpo_ratio(std::nan(""), 1.0));
  // the log clamp bounds extreme ratios
  CHECK(fpo_ratio(0.0, 1000.0) == Catch::Approx(std::exp(20.0)));
}

TEST_CASE("clipped surrogate reference points", "[algo]") {
  CHECK(clipped_surrogate(1.0, 0.37, 0.05) == 0.37);
  CHECK(clipped_surrogate(1.2, 1.0, 0.05) == Catch::Approx(1.05));
  CHECK(clipped_surrogate(0.8, -1.0, 0.05) == Catch::Approx(-0.95));
  CHECK_THROWS(clipped_surrogate(1.0, 1.0, 0.0));
}

TEST_CASE("surrogate never exceeds the unclipped term and is flat past the clip", "[algo]") {
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const double r = std::exp(rng.normal());
    const double adv = rng.normal();
    const double eps = 0.05 + 0.3 * rng.uniform();
    const double s = clipped_surrogate(r, adv, eps);
    REQUIRE(s <= r * adv + 1e-12);

    // non-increasing in |r - 1| beyond the clip boundary, either sign of adv
    if (std::abs(r - 1.0) > eps) {
      const double r_far = 1.0 + (r - 1.0) * 1.5;
      REQUIRE(clipped_surrogate(r_far, adv, eps) <= s + 1e-12);
    }
  }
}

TEST_CASE("ratios are exactly one immediately after logging", "[algo]") {
  FlowPolicyCfg cfg;
  cfg.hidden = {8, 8};
  FlowSetup s(cfg, 2, 2, 11);
  RolloutBuffer buf = s.collect(32, [](int i) { return i % 3 == 0 ? 1.0 : -0.5; }, 100);

  // recompute under unchanged parameters
  Matrix obs(32, 2);
  obs.data = buf.obs;
  Matrix actions(32, 2);
  actions.data = buf.actions;
  Matrix lnew = s.policy.mc_loss_values(s.policy_params, obs, actions, buf.mc_tau.data(),
                                        buf.mc_eps.data(), buf.n_mc);
  double max_dev = 0.0;
  double srg_sum = 0.0, adv_sum = 0.0;
  for (int i = 0; i < 32; ++i) {
    double lold = 0.0;
    for (int p = 0; p < buf.n_mc; ++p) lold += buf.mc_loss_old[i * buf.n_mc + p];
    lold /= buf.n_mc;
    const double r = fpo_ratio(lnew.data[i], lold);
    max_dev = std::max(max_dev, std::abs(r - 1.0));
    srg_sum += clipped_surrogate(r, buf.advantages[i], 0.05);
    adv_sum += buf.advantages[i];
  }
  CHECK(max_dev < 1e-12);
  CHECK(srg_sum / 32 == Catch::Approx(adv_sum / 32).margin(1e-12));
}

TEST_CASE("zero epochs leave parameters untouched", "[algo]") {
  FlowPolicyCfg cfg;
  cfg.hidden = {8};
  FlowSetup s(cfg, 2, 2, 13);
  RolloutBuffer buf = s.collect(8, [](int) { return 1.0; }, 200);
  UpdateCfg ucfg;
  ucfg.epochs = 0;
  const std::vector<double> before = s.policy_params.values;
  Rng shuffle(1);
  fpo_update(buf, s.policy, &s.policy_params, &s.policy_adam, s.value_net, &s.value_params,
             &s.value_adam, FpoCfg{}, ucfg, shuffle);
  CHECK(s.policy_params.values == before);
}

TEST_CASE("a positive-advantage transition pulls its matching loss down", "[algo]") {
  FlowPolicyCfg cfg;
  cfg.hidden = {8, 8};
  FlowSetup s(cfg, 2, 2, 17, 1e-3);
  RolloutBuffer buf = s.collect(1, [](int) { return 1.0; }, 300);
  REQUIRE(buf.advantages[0] > 0.0);

  Matrix obs(1, 2);
  obs.data = buf.obs;
  Matrix actions(1, 2);
  actions.data = buf.actions;
  const double before = s.policy.mc_loss_values(s.policy_params, obs, actions, buf.mc_tau.data(),
                                                buf.mc_eps.data(), buf.n_mc).data[0];
  UpdateCfg ucfg;
  ucfg.epochs = 1;
  ucfg.minibatches = 1;
  ucfg.adv_mode = AdvantageMode::kNone;
  Rng shuffle(2);
  fpo_update(buf, s.policy, &s.policy_params, &s.policy_adam, s.value_net, &s.value_params,
             &s.value_adam, FpoCfg{}, ucfg, shuffle);
  const double after = s.policy.mc_loss_values(s.policy_params, obs, actions, buf.mc_tau.data(),
                                               buf.mc_eps.data(), buf.n_mc).data[0];
  CHECK(after < before);
}

TEST_CASE("all-zero advantages freeze the policy while the value head moves", "[algo]") {
  FlowPolicyCfg cfg;
  cfg.hidden = {8};
  FlowSetup s(cfg, 2, 2, 19);
  RolloutBuffer buf = s.collect(16, [](int) { return 0.7; }, 400);
  // constant rewards + terminal steps + zscore => exactly zero advantages
  std::vector<double> z = normalize_advantages(buf.advantages, AdvantageMode::kZscore);
  buf.advantages = z;
  bool all_zero = true;
  for (double a : buf.advantages) all_zero &= (a == 0.0);
  // fall back: force zeros if the value head made them differ
  if (!all_zero) buf.advantages.assign(buf.advantages.size(), 0.0);

  UpdateCfg ucfg;
  ucfg.epochs = 2;
  ucfg.minibatches = 2;
  ucfg.adv_mode = AdvantageMode::kNone;
  const std::vector<double> p_before = s.policy_params.values;
  const std::vector<double> v_before = s.value_params.values;
  Rng shuffle(3);
  fpo_update(buf, s.policy, &s.policy_params, &s.policy_adam, s.value_net, &s.value_params,
             &s.value_adam, FpoCfg{}, ucfg, shuffle);
  CHECK(s.policy_params.values == p_before);
  CHECK(s.value_params.values != v_before);
}

TEST_CASE("debug recomputation accepts freshly logged losses", "[algo]") {
  FlowPolicyCfg cfg;
  cfg.hidden = {8};
  FlowSetup s(cfg, 2, 2, 23);
  RolloutBuffer buf = s.collect(8, [](int) { return 1.0; }, 500);
  UpdateCfg ucfg;
  ucfg.epochs = 1;
  ucfg.minibatches = 1;
  ucfg.debug_recompute_old = true;
  Rng shuffle(4);
  CHECK_NOTHROW(fpo_update(buf, s.policy, &s.policy_params, &s.policy_adam, s.value_net,
                           &s.value_params, &s.value_adam, FpoCfg{}, ucfg, shuffle));

  // tampering with a stored loss must be caught
  buf.mc_loss_old[3] += 1e-9;
  CHECK_THROWS(fpo_update(buf, s.policy, &s.policy_params, &s.policy_adam, s.value_net,
                          &s.value_params, &s.value_adam, FpoCfg{}, ucfg, shuffle));
}

TEST_CASE("full minibatch objective gradient matches finite differences", "[algo]") {
  // Small flow setup; builds the complete loss (clipped surrogate + value
  // term) and checks every parameter of both networks. Stored "old" losses
  // are offset so some samples clip and others do not.
  FlowPolicyCfg cfg;
  cfg.hidden = {6};
  cfg.n_mc = 2;
  FlowSetup s(cfg, 2, 2, 31);
  RolloutBuffer buf = s.collect(6, [](int i) { return i % 2 ? 1.0 : -1.0; }, 600);
  for (int i = 0; i < 6; ++i) {
    for (int p = 0; p < buf.n_mc; ++p) {
      // alternate: strongly clipped, mildly off, exactly on-policy
      buf.mc_loss_old[i * buf.n_mc + p] += (i % 3 == 0) ? 0.5 : (i % 3 == 1 ? 0.01 : 0.0);
    }
  }
  const FpoCfg fcfg;
  UpdateCfg ucfg;
  ucfg.adv_mode = AdvantageMode::kNone;

  std::vector<double> adv = buf.advantages;
  std::vector<int> rows(6);
  std::iota(rows.begin(), rows.end(), 0);

  auto objective = [&](const ParamSet& pp, const ParamSet& vp) {
    Tape tape(true);
    Mlp::Leaves plv = s.policy.net().leaves(tape, pp);
    Matrix obs(6, 2);
    obs.data = buf.obs;
    Matrix actions(6, 2);
    actions.data = buf.actions;
    FlowPolicy::McLossNodes nodes = s.policy.mc_loss_nodes(tape, plv, obs, actions,
                                                           buf.mc_tau.data(), buf.mc_eps.data(), 2);
    std::vector<double> lold(6);
    for (int i = 0; i < 6; ++i) {
      lold[i] = (buf.mc_loss_old[i * 2] + buf.mc_loss_old[i * 2 + 1]) / 2.0;
    }
    Tape::Ref ratio = tape.exp_of(tape.clamp(
        tape.sub(tape.constant(Matrix::col_vector(lold)), nodes.per_sample), -20.0, 20.0));
    Tape::Ref srg = fpo::detail::surrogate_nodes(tape, ratio, adv, fcfg.eps_clip);
    Mlp::Leaves vlv = s.value_net.leaves(tape, vp);
    Tape::Ref vloss = fpo::detail::value_loss_nodes(tape, s.value_net, vlv, tape.constant(obs),
                                                    buf.returns, buf.values, ucfg);
    Tape::Ref loss = tape.add(tape.neg(srg), vloss);
    return std::tuple{tape.value(loss).data[0], std::move(tape), plv, vlv, loss};
  };

  // analytic gradients
  auto [lval, tape, plv, vlv, loss] = objective(s.policy_params, s.value_params);
  tape.backward(loss);
  std::vector<double> pgrad(s.policy_params.values.size(), 0.0);
  s.policy.net().accumulate_grads(tape, plv, s.policy_params, &pgrad);
  std::vector<double> vgrad(s.value_params.values.size(), 0.0);
  s.value_net.accumulate_grads(tape, vlv, s.value_params, &vgrad);

  const double h = 1e-5;
  for (size_t i = 0; i < s.policy_params.values.size(); ++i) {
    ParamSet p = s.policy_params;
    p.values[i] += h;
    const double fp = std::get<0>(objective(p, s.value_params));
    p.values[i] -= 2 * h;
    const double fm = std::get<0>(objective(p, s.value_params));
    REQUIRE(pgrad[i] == Catch::Approx((fp - fm) / (2 * h)).epsilon(1e-4).margin(1e-8));
  }
  for (size_t i = 0; i < s.value_params.values.size(); ++i) {
    ParamSet v = s.value_params;
    v.values[i] += h;
    const double fp = std::get<0>(objective(s.policy_params, v));
    v.values[i] -= 2 * h;
    const double fm = std::get<0>(objective(s.policy_params, v));
    REQUIRE(vgrad[i] == Catch::Approx((fp - fm) / (2 * h)).epsilon(1e-4).margin(1e-8));
  }
}

TEST_CASE("gaussian ratios are one at the logging parameters and the surrogate is the mean advantage",
          "[algo]") {
  GaussianPolicyCfg cfg;
  cfg.hidden = {8};
  ParamSet params, vparams;
  GaussianPolicy policy(cfg, 3, 2, 1.0, &params);
  Mlp value_net({3, 8, 1}, Activation::kTanh, &vparams, "value");
  Rng rng(41);
  policy.init_params(&params, rng);
  value_net.init_params(&vparams, rng, 1.0);

  Matrix obs(16, 3);
  for (double& v : obs.data) v = rng.normal();
  auto noise = make_streams(16, 42);
  GaussianSampleBatch out = policy.sample_actions(params, obs, noise.data());
  Matrix lnew = policy.logp_values(params, obs, out.actions);
  for (int i = 0; i < 16; ++i) {
    REQUIRE(std::exp(lnew.data[i] - out.logp_old.data[i]) == 1.0);
  }
}

TEST_CASE("log-ratio equals the direct density quotient", "[algo]") {
  GaussianPolicyCfg cfg;
  cfg.hidden = {8};
  ParamSet p_old, p_new;
  GaussianPolicy pol_old(cfg, 2, 2, 1.0, &p_old);
  GaussianPolicy pol_new(cfg, 2, 2, 1.0, &p_new);
  Rng rng(43);
  pol_old.init_params(&p_old, rng);
  pol_new.init_params(&p_new, rng);
  for (double& v : p_new.values) v += 0.05 * rng.normal();

  auto density = [](double a, double mu, double sigma) {
    return std::exp(-0.5 * (a - mu) * (a - mu) / (sigma * sigma)) /
           (sigma * std::sqrt(6.283185307179586));
  };

  for (int trial = 0; trial < 50; ++trial) {
    Matrix obs(1, 2);
    obs.data = {rng.normal(), rng.normal()};
    Matrix a(1, 2);
    a.data = {rng.normal(), rng.normal()};
    const double lr = pol_new.logp_values(p_new, obs, a).data[0] -
                      pol_old.logp_values(p_old, obs, a).data[0];

    Matrix mu_new = pol_new.mean_values(p_new, obs);
    Matrix mu_old = pol_old.mean_values(p_old, obs);
    Matrix ls_new = p_new.segment_matrix(pol_new.log_std_segment());
    Matrix ls_old = p_old.segment_matrix(pol_old.log_std_segment());
    double quotient = 1.0;
    for (int j = 0; j < 2; ++j) {
      quotient *= density(a.data[j], mu_new.data[j], std::exp(ls_new.data[j])) /
                  density(a.data[j], mu_old.data[j], std::exp(ls_old.data[j]));
    }
    REQUIRE(std::exp(lr) == Catch::Approx(quotient).margin(1e-10));
  }
}

TEST_CASE("diagonal gaussian entropy closed form", "[algo]") {
  GaussianPolicyCfg cfg;
  cfg.hidden = {4};
  ParamSet params;
  GaussianPolicy policy(cfg, 2, 2, 1.0, &params);
  // sigma = 1 in both coordinates
  Tape tape(false);
  GaussianPolicy::Leaves lv = policy.leaves(tape, params);
  const double got = tape.value(policy.entropy_node(tape, lv)).data[0];
  CHECK(got == Catch::Approx(2.8378770664093453).margin(1e-10));
}

TEST_CASE("denoising-path ratio is one at the logging parameters", "[algo]") {
  FlowPolicyCfg cfg;
  cfg.hidden = {8};
  cfg.sampler.method = SamplerMethod::kStochasticEuler;
  cfg.sampler.n_steps = 4;
  cfg.sampler.churn_std = 0.05;
  ParamSet params;
  FlowPolicy policy(cfg, 2, 2, &params);
  Rng rng(47);
  policy.init_params(&params, rng);

  Matrix obs(5, 2);
  for (double& v : obs.data) v = rng.normal();
  auto noise = make_streams(5, 48);
  auto mc = make_streams(5, 49);
  FlowSampleBatch out = policy.sample_actions(params, obs, noise.data(), mc.data(), true);

  Tape tape(false);
  Mlp::Leaves lv = policy.net().leaves(tape, params);
  Matrix lnew = tape.value(policy.path_logp_nodes(tape, lv, obs, out.path_states, 0.05));
  for (int i = 0; i < 5; ++i) {
    REQUIRE(std::exp(lnew.data[i] - out.path_logp_old.data[i]) == 1.0);
  }
}

TEST_CASE("one-step path ratio with a shifted mean", "[algo]") {
  // 1-D, one denoising step. Stored state equals the old mean; moving the
  // mean by sigma changes the log-likelihood by exactly -1/2.
  const double sigma = 0.05;
  const double logp_old = -0.5 * std::log(6.283185307179586 * sigma * sigma);
  const double d = sigma;
  const double logp_new = -0.5 * d * d / (sigma * sigma) - 0.5 * std::log(6.283185307179586 * sigma * sigma);
  CHECK(std::exp(logp_new - logp_old) == Catch::Approx(std::exp(-0.5)).margin(1e-12));
}

TEST_CASE("path log-likelihood is the sum of per-step terms", "[algo]") {
  FlowPolicyCfg cfg;
  cfg.hidden = {6};
  cfg.sampler.method = SamplerMethod::kStochasticEuler;
  cfg.sampler.n_steps = 10;
  cfg.sampler.churn_std = 0.07;
  ParamSet params;
  FlowPolicy policy(cfg, 2, 2, &params);
  Rng rng(53);
  policy.init_params(&params, rng);

  Matrix obs(2, 2);
  for (double& v : obs.data) v = rng.normal();
  auto noise = make_streams(2, 54);
  auto mc = make_streams(2, 55);
  FlowSampleBatch out = policy.sample_actions(params, obs, noise.data(), mc.data(), true);

  // sum the ten per-step likelihoods computed independently
  for (int i = 0; i < 2; ++i) {
    double manual = 0.0;
    for (int k = 0; k < 10; ++k) {
      Matrix xk(1, 2), xk1(1, 2), oi(1, 2);
      for (int j = 0; j < 2; ++j) {
        xk.data[j] = out.path_states[k].at(i, j);
        xk1.data[j] = out.path_states[k + 1].at(i, j);
        oi.data[j] = obs.at(i, j);
      }
      Matrix v = policy.velocity(params, oi, xk, static_cast<double>(k) / 10.0);
      for (int j = 0; j < 2; ++j) {
        const double mean = xk.data[j] + 0.1 * v.data[j];
        const double diff = xk1.data[j] - mean;
        manual += -0.5 * diff * diff / (0.07 * 0.07) - 0.5 * std::log(6.283185307179586 * 0.07 * 0.07);
      }
    }
    REQUIRE(out.path_logp_old.data[i] == Catch::Approx(manual).margin(1e-8));
  }
}

TEST_CASE("advantage shifts before zscore leave the update bit-identical", "[algo]") {
  // dyadic advantages keep the arithmetic exact
  std::vector<double> adv = {1.0, 2.0, 3.0, 4.0, -1.0, -2.0, 0.5, 1.5};
  std::vector<double> shifted = adv;
  for (double& a : shifted) a += 2.0;
  CHECK(normalize_advantages(adv, AdvantageMode::kZscore) ==
        normalize_advantages(shifted, AdvantageMode::kZscore));
}

TEST_CASE("without normalization a positive shift rescales per-sample gradients", "[algo]") {
  // At a ratio of exactly 1 the per-sample surrogate gradient is
  // advantage * d(ratio)/d(theta); shifting advantages by c scales each
  // sample's gradient by (a + c) / a without touching its direction.
  FlowPolicyCfg cfg;
  cfg.hidden = {6};
  cfg.n_mc = 2;
  FlowSetup s(cfg, 2, 2, 59);
  RolloutBuffer buf = s.collect(4, [](int) { return 1.0; }, 700);
  std::vector<double> adv = {0.5, 1.0, 1.5, 2.0};
  const double c = 0.25;  // keeps every sign intact

  auto per_sample_grad = [&](double advantage, int row) {
    Tape tape(true);
    Mlp::Leaves plv = s.policy.net().leaves(tape, s.policy_params);
    Matrix obs(1, 2), actions(1, 2);
    for (int j = 0; j < 2; ++j) {
      obs.data[j] = buf.obs[row * 2 + j];
      actions.data[j] = buf.actions[row * 2 + j];
    }
    FlowPolicy::McLossNodes nodes = s.policy.mc_loss_nodes(
        tape, plv, obs, actions, buf.mc_tau.data() + row * 2, buf.mc_eps.data() + row * 4, 2);
    std::vector<double> lold = {(buf.mc_loss_old[row * 2] + buf.mc_loss_old[row * 2 + 1]) / 2.0};
    Tape::Ref ratio = tape.exp_of(tape.clamp(
        tape.sub(tape.constant(Matrix::col_vector(lold)), nodes.per_sample), -20.0, 20.0));
    Tape::Ref srg = fpo::detail::surrogate_nodes(tape, ratio, {advantage}, 0.05);
    tape.backward(srg);
    std::vector<double> g(s.policy_params.values.size(), 0.0);
    s.policy.net().accumulate_grads(tape, plv, s.policy_params, &g);
    return g;
  };

  for (int row = 0; row < 4; ++row) {
    std::vector<double> g0 = per_sample_grad(adv[row], row);
    std::vector<double> g1 = per_sample_grad(adv[row] + c, row);
    const double scale = (adv[row] + c) / adv[row];
    for (size_t i = 0; i < g0.size(); ++i) {
      REQUIRE(g1[i] == Catch::Approx(scale * g0[i]).margin(1e-12));
    }
  }
}
