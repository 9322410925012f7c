#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fpo/env.hpp"
#include "fpo/rng.hpp"

using namespace fpo;

TEST_CASE("stepping into a goal cell pays out and ends the episode", "[env]") {
  GridWorldEnv env;
  Rng rng(1);
  std::vector<double> obs;
  env.set_state(12.5, 23.5);  // one cell below the top goal band
  StepResult r = env.step(std::array{0.0, 1.0}, rng, &obs);
  CHECK(r.reward == 1.0);
  CHECK(r.terminated);
}

TEST_CASE("ordinary transitions are reward-free", "[env]") {
  GridWorldEnv env;
  Rng rng(1);
  std::vector<double> obs;
  env.set_state(5.0, 5.0);
  StepResult r = env.step(std::array{0.3, -0.2}, rng, &obs);
  CHECK(r.reward == 0.0);
  CHECK_FALSE(r.terminated);
  CHECK_FALSE(r.truncated);
}

TEST_CASE("hitting the step limit off-goal pays the penalty", "[env]") {
  GridWorldEnv env;
  Rng rng(1);
  std::vector<double> obs;
  env.set_state(5.0, 5.0);
  StepResult r;
  for (int i = 0; i < 200; ++i) {
    r = env.step(std::array{0.0, 0.0}, rng, &obs);
  }
  CHECK(r.reward == -1.0);
  CHECK(r.terminated);
}

TEST_CASE("episode returns are exactly +1 or -1", "[env]") {
  GridWorldEnv env;
  Rng reset_rng(7), dyn_rng(8), act_rng(9);
  std::vector<double> obs;
  for (int ep = 0; ep < 50; ++ep) {
    env.reset(reset_rng, &obs);
    double total = 0.0;
    while (true) {
      StepResult r = env.step(std::array{act_rng.normal(), act_rng.normal()}, dyn_rng, &obs);
      total += r.reward;
      if (r.terminated || r.truncated) break;
    }
    CHECK((total == 1.0 || total == -1.0));
  }
}

TEST_CASE("the saddle state sits equidistant from both goal bands", "[env]") {
  const auto s = GridWorldEnv::saddle_state();
  CHECK(s[0] == 12.5);
  CHECK(s[1] == 12.5);
  // band rows are y in [24, 25) and [0, 1); nearest points share x = s[0]
  const double d_top = 24.0 - s[1];
  const double d_bot = s[1] - 1.0;
  CHECK(d_top == d_bot);
}

TEST_CASE("reflecting states and actions across the midline mirrors trajectories", "[env]") {
  GridWorldEnv a, b;
  Rng rng(1);
  std::vector<double> oa, ob;
  a.set_state(10.0, 8.0);
  b.set_state(10.0, 25.0 - 8.0);
  Rng act_rng(17);
  for (int i = 0; i < 100; ++i) {
    const double ax = act_rng.normal() * 0.7;
    const double ay = act_rng.normal() * 0.7;
    StepResult ra = a.step(std::array{ax, ay}, rng, &oa);
    StepResult rb = b.step(std::array{ax, -ay}, rng, &ob);
    REQUIRE(oa[0] == Catch::Approx(ob[0]).margin(1e-12));
    REQUIRE(oa[1] == Catch::Approx(25.0 - ob[1]).margin(1e-12));
    REQUIRE(ra.reward == rb.reward);
    REQUIRE(ra.terminated == rb.terminated);
    if (ra.terminated) break;
  }
}

TEST_CASE("point mass pays out on reaching a goal", "[env]") {
  PointMass2Env env;
  Rng rng(1);
  std::vector<double> obs;
  env.set_state(0.0, PointMass2Env::kGoalY - 0.35, 0.0, 1.0);
  StepResult r = env.step(std::array{0.0, 1.0}, rng, &obs);
  CHECK(r.reward > 0.9);
  CHECK(r.terminated);
}

TEST_CASE("pendulum rewards: upright is free, hanging costs pi^2", "[env]") {
  PendulumEnv env;
  Rng rng(1);
  std::vector<double> obs;
  env.set_state(0.0, 0.0);
  StepResult r = env.step(std::array{0.0}, rng, &obs);
  CHECK(r.reward == 0.0);

  env.set_state(3.141592653589793, 0.0);
  r = env.step(std::array{0.0}, rng, &obs);
  CHECK(r.reward == Catch::Approx(-9.8696044).epsilon(1e-6));
}

TEST_CASE("undriven pendulum conserves energy within one percent", "[env]") {
  PendulumEnv env;
  env.set_state(2.0, 0.0);  // large swing, no torque, no damping in the model
  const double e0 = env.energy();
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    env.integrate_free(0.0, 1);
    worst = std::max(worst, std::abs(env.energy() - e0));
  }
  CHECK(worst / std::abs(e0) < 0.01);
}

TEST_CASE("identical env states and actions give identical transitions", "[env]") {
  std::vector<uint64_t> seeds = {42, 42, 42, 42};
  VecEnv vec("gridworld", 4, seeds);
  vec.reset_all();
  for (int i = 1; i < 4; ++i) REQUIRE(vec.observation(i) == vec.observation(0));
  std::vector<double> actions(8, 0.25);
  VecEnv::BatchStep out = vec.step(actions);
  for (int i = 1; i < 4; ++i) {
    CHECK(out.rewards[i] == out.rewards[0]);
    CHECK(vec.observation(i) == vec.observation(0));
  }
}

TEST_CASE("auto-reset hands back a fresh start with the terminal reward", "[env]") {
  std::vector<uint64_t> seeds = {5};
  VecEnv vec("gridworld", 1, seeds);
  vec.reset_all();
  auto& grid = dynamic_cast<GridWorldEnv&>(vec.env(0));
  grid.set_state(12.5, 23.5);
  VecEnv::BatchStep out = vec.step({0.0, 1.0});
  CHECK(out.rewards[0] == 1.0);
  CHECK(out.terminated[0] == 1);
  // final_obs is the goal cell; the live observation is the reset draw
  CHECK(GridWorldEnv::in_goal(out.final_obs[0][0], out.final_obs[0][1]));
  CHECK_FALSE(GridWorldEnv::in_goal(vec.observation(0)[0], vec.observation(0)[1]));
}

TEST_CASE("permuting per-env seeds permutes outcomes identically", "[env]") {
  std::vector<uint64_t> seeds = {101, 202, 303};
  VecEnv a("pointmass2", 3, seeds);
  VecEnv b("pointmass2", 3, {303, 101, 202});
  a.reset_all();
  b.reset_all();
  CHECK(a.observation(0) == b.observation(1));
  CHECK(a.observation(1) == b.observation(2));
  CHECK(a.observation(2) == b.observation(0));
  std::vector<double> actions = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  std::vector<double> permuted = {0.5, 0.6, 0.1, 0.2, 0.3, 0.4};
  VecEnv::BatchStep oa = a.step(actions);
  VecEnv::BatchStep ob = b.step(permuted);
  CHECK(oa.rewards[0] == ob.rewards[1]);
  CHECK(oa.rewards[2] == ob.rewards[0]);
  CHECK(a.observation(0) == b.observation(1));
  CHECK(a.observation(2) == b.observation(0));
}
