#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "fpo/checkpoint.hpp"
#include "fpo/config.hpp"
#include "fpo/train.hpp"

using namespace fpo;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string temp_dir(const std::string& tag) {
  const std::string d = (fs::temp_directory_path() / ("fpo_test_" + tag)).string();
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Tiny config that trains in well under a second.
RunConfig tiny_config(const std::string& out, const std::string& algo = "fpo") {
  ConfigText text = ConfigText::parse(
      "[run]\n"
      "env = \"gridworld\"\n"
      "algo = \"" + algo + "\"\n"
      "seed = 7\n"
      "total_batches = 2\n"
      "num_envs = 4\n"
      "unroll_length = 6\n"
      "eval_every = 1\n"
      "eval_episodes = 3\n"
      "out_dir = \"" + out + "\"\n"
      "[policy]\n"
      "hidden = [8, 8]\n"
      "n_mc = 2\n"
      "[value]\n"
      "hidden = [8]\n"
      "[sampler]\n"
      "n_steps = 4\n"
      "[update]\n"
      "epochs = 1\n"
      "minibatches = 2\n");
  return RunConfig::load(std::move(text));
}

}  // namespace

TEST_CASE("config text round-trips through print and parse", "[harness]") {
  RunConfig defaults = RunConfig::defaults_for("gridworld", "fpo");
  RunConfig reparsed = RunConfig::load(ConfigText::parse(defaults.to_text()));
  CHECK(reparsed.to_text() == defaults.to_text());

  RunConfig pm = RunConfig::defaults_for("pointmass2", "dppo");
  RunConfig pm2 = RunConfig::load(ConfigText::parse(pm.to_text()));
  CHECK(pm2.to_text() == pm.to_text());
  CHECK(pm2.sampler_method == "stochastic_euler");
}

TEST_CASE("unknown config keys are rejected", "[harness]") {
  CHECK_THROWS_WITH(RunConfig::load(ConfigText::parse("[run]\nenv = \"gridworld\"\nbogus_key = 3\n")),
                    Catch::Matchers::ContainsSubstring("bogus_key"));
  CHECK_THROWS(RunConfig::load(ConfigText::parse("[run]\nenv = \"not_an_env\"\n")));
  CHECK_THROWS(RunConfig::load(ConfigText::parse("[run]\nalgo = \"sarsa\"\n")));
  CHECK_THROWS(RunConfig::load(ConfigText::parse("[fpo]\neps_clip = 0\n")));
}

TEST_CASE("dppo insists on the stochastic sampler", "[harness]") {
  CHECK_THROWS(RunConfig::load(
      ConfigText::parse("[run]\nalgo = \"dppo\"\n[sampler]\nmethod = \"euler\"\n")));
  CHECK_NOTHROW(RunConfig::load(ConfigText::parse("[run]\nalgo = \"dppo\"\n")));
}

TEST_CASE("zero batches emit only the initial checkpoint", "[harness]") {
  const std::string out = temp_dir("zero_batches");
  RunConfig cfg = tiny_config(out);
  cfg.total_batches = 0;
  Trainer trainer(cfg);
  TrainOutcome res = trainer.run();
  CHECK(res.batches_run == 0);
  CHECK(fs::exists(res.checkpoint_path));
  CHECK(slurp(res.metrics_path).empty());
}

TEST_CASE("identical config and seed give byte-identical metrics", "[harness]") {
  const std::string out1 = temp_dir("determinism_a");
  const std::string out2 = temp_dir("determinism_b");
  TrainOutcome r1 = Trainer(tiny_config(out1)).run();
  TrainOutcome r2 = Trainer(tiny_config(out2)).run();
  CHECK(slurp(r1.metrics_path) == slurp(r2.metrics_path));
  CHECK(slurp(r1.checkpoint_path) == slurp(r2.checkpoint_path));
}

TEST_CASE("metrics rows are append-only with strictly increasing step counts", "[harness]") {
  const std::string out = temp_dir("metrics_monotone");
  TrainOutcome res = Trainer(tiny_config(out)).run();
  std::ifstream in(res.metrics_path);
  std::string line;
  int64_t prev = -1;
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = nlohmann::json::parse(line);
    const int64_t steps = row["env_steps"].get<int64_t>();
    CHECK(steps > prev);
    prev = steps;
    ++rows;
  }
  CHECK(rows == 2);
}

TEST_CASE("checkpoints reproduce the in-process evaluation exactly", "[harness]") {
  const std::string out = temp_dir("ckpt_roundtrip");
  RunConfig cfg = tiny_config(out);
  Trainer trainer(cfg);
  TrainOutcome res = trainer.run();

  EvalSummary in_process = trainer.evaluate(5, 12345);
  Checkpoint ckpt = Checkpoint::load(res.checkpoint_path);
  LoadedAgent agent(ckpt);
  CHECK(agent.policy_params.values == trainer.policy_params().values);

  // identical eval stream derivation: run seed + salt
  EvalSummary from_ckpt = evaluate_checkpoint(ckpt, "gridworld", 5, cfg.seed, 12345);
  CHECK(from_ckpt.episode_returns == in_process.episode_returns);
  CHECK(from_ckpt.success_rate == in_process.success_rate);
}

TEST_CASE("evaluating zero episodes is an empty summary", "[harness]") {
  const std::string out = temp_dir("eval_zero");
  RunConfig cfg = tiny_config(out);
  Trainer trainer(cfg);
  EvalSummary ev = trainer.evaluate(0);
  CHECK(ev.episodes == 0);
  CHECK(ev.episode_returns.empty());
}

TEST_CASE("fixed seeds reproduce per-episode evaluation returns", "[harness]") {
  const std::string out = temp_dir("eval_seeded");
  RunConfig cfg = tiny_config(out);
  Trainer trainer(cfg);
  EvalSummary a = trainer.evaluate(6, 99);
  EvalSummary b = trainer.evaluate(6, 99);
  CHECK(a.episode_returns == b.episode_returns);
  EvalSummary c = trainer.evaluate(6, 100);
  CHECK(a.episode_returns != c.episode_returns);
}

TEST_CASE("checkpoint eval rejects a mismatched env", "[harness]") {
  const std::string out = temp_dir("eval_mismatch");
  RunConfig cfg = tiny_config(out);
  Trainer trainer(cfg);
  Checkpoint ckpt = trainer.make_checkpoint();
  CHECK_THROWS(evaluate_checkpoint(ckpt, "pendulum", 2, 0, 0));
  CHECK_NOTHROW(evaluate_checkpoint(ckpt, "gridworld", 2, 0, 0));
}

TEST_CASE("an untrained flow policy probes as a single mode", "[harness]") {
  const std::string out = temp_dir("probe_untrained");
  RunConfig cfg = tiny_config(out);
  Trainer trainer(cfg);
  Checkpoint ckpt = trainer.make_checkpoint();
  ModeReport rep = probe_checkpoint(ckpt, GridWorldEnv::saddle_state(), 256, 0);
  CHECK(rep.n_samples == 256);
  CHECK(rep.n_modes == 1);
  CHECK(rep.dominant_mass == 1.0);
}

TEST_CASE("probe dump writes sample and trace files", "[harness]") {
  const std::string out = temp_dir("probe_dump");
  RunConfig cfg = tiny_config(out);
  Trainer trainer(cfg);
  Checkpoint ckpt = trainer.make_checkpoint();
  probe_checkpoint(ckpt, GridWorldEnv::saddle_state(), 16, 0, out + "/probe");
  CHECK(fs::exists(out + "/probe/probe_samples.csv"));
  const std::string trace = slurp(out + "/probe/probe_denoise_trace.csv");
  CHECK(trace.find("0,0.5") != std::string::npos);
  CHECK(trace.find("0,1") != std::string::npos);
}

TEST_CASE("a 1x1 sweep matches a plain training run", "[harness]") {
  const std::string out = temp_dir("sweep_single");
  RunConfig cfg = tiny_config(out + "/direct");
  TrainOutcome direct = Trainer(cfg).run();

  std::string base_text = cfg.to_text();
  SweepResult res = run_sweep(base_text, "policy.n_mc=2", 1, out + "/sweep");
  REQUIRE(res.cells.size() == 1);
  REQUIRE(res.cells[0].terminal_returns.size() == 1);
  // sweep forces seed 0; rerun directly at seed 0 for comparison
  ConfigText t2 = ConfigText::parse(base_text);
  t2.set("run.seed", "0");
  t2.set("run.out_dir", "\"" + out + "/direct0\"");
  TrainOutcome direct0 = Trainer(RunConfig::load(std::move(t2))).run();
  CHECK(res.cells[0].terminal_returns[0] == direct0.final_eval.return_mean);
  (void)direct;
}

TEST_CASE("sweeps report a stderr column once there are two seeds", "[harness]") {
  const std::string out = temp_dir("sweep_two_seeds");
  RunConfig cfg = tiny_config(out + "/base");
  SweepResult res = run_sweep(cfg.to_text(), "fpo.eps_clip=0.05", 2, out + "/sweep");
  REQUIRE(res.cells.size() == 1);
  CHECK(res.cells[0].terminal_returns.size() == 2);
  const std::string csv = slurp(res.csv_path);
  CHECK(csv.find("cell_return_stderr") != std::string::npos);
}

TEST_CASE("sweeping a non-whitelisted key fails", "[harness]") {
  CHECK_THROWS_WITH(parse_grid("gae.gamma=0.9,0.99"), Catch::Matchers::ContainsSubstring("not sweepable"));
  CHECK_NOTHROW(parse_grid("policy.n_mc=1,4,8;fpo.eps_clip=0.05,0.1"));
  CHECK(parse_grid("policy.n_mc=1,4,8;fpo.eps_clip=0.05,0.1").size() == 6);
}

TEST_CASE("gridworld success drives the early-stop hook", "[harness]") {
  // with stop_success_rate = 2.0 early stop can never fire
  const std::string out = temp_dir("early_stop");
  RunConfig cfg = tiny_config(out);
  cfg.stop_success_rate = 2.0;
  TrainOutcome res = Trainer(cfg).run();
  CHECK(res.first_success_batch == -1);
  CHECK(res.batches_run == 2);
}

TEST_CASE("buffer dump writes one record per transition", "[harness]") {
  const std::string out = temp_dir("buffer_dump");
  RunConfig cfg = tiny_config(out);
  cfg.debug_buffer_dump = true;
  Trainer trainer(cfg);
  trainer.run();
  std::ifstream in(out + "/buffer_last.jsonl");
  REQUIRE(in);
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 4 * 6);
}
