// Command-line front end: train / eval / probe / sweep / print-config.
// Errors leave a single machine-readable JSON line on stderr and a nonzero
// exit code.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fpo/checkpoint.hpp"
#include "fpo/config.hpp"
#include "fpo/train.hpp"

namespace {

std::vector<double> parse_state(const std::string& s) {
  std::vector<double> out;
  std::istringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

nlohmann::json eval_json(const fpo::EvalSummary& ev) {
  nlohmann::json j;
  j["episodes"] = ev.episodes;
  j["return_mean"] = ev.return_mean;
  j["return_stderr"] = ev.return_stderr;
  j["success_rate"] = ev.success_rate;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flow-policy reinforcement learning toolkit"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a policy from a config file");
  std::string train_config;
  int64_t train_seed = -1;
  std::string train_out;
  train->add_option("--config", train_config, "config file")->required();
  train->add_option("--seed", train_seed, "override run.seed");
  train->add_option("--out", train_out, "override run.out_dir");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_env, eval_sampler, eval_csv;
  int eval_episodes = 64;
  int eval_steps = 0;
  uint64_t eval_seed = 0;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--env", eval_env, "environment key")->required();
  eval->add_option("--episodes", eval_episodes, "number of episodes");
  eval->add_option("--sampler", eval_sampler, "sampler override: euler | heun");
  eval->add_option("--steps", eval_steps, "integration steps override");
  eval->add_option("--seed", eval_seed, "evaluation seed");
  eval->add_option("--csv", eval_csv, "per-episode CSV output path");
  bool eval_probe_start = false;
  eval->add_flag("--from-probe-state", eval_probe_start, "start every episode at the env's probe state");

  // probe
  auto* probe = app.add_subcommand("probe", "sample a policy at one state and report action modes");
  std::string probe_ckpt, probe_state, probe_out;
  int probe_samples = 256;
  uint64_t probe_seed = 0;
  probe->add_option("--ckpt", probe_ckpt, "checkpoint file")->required();
  probe->add_option("--state", probe_state, "comma-separated state, e.g. 12.5,12.5")->required();
  probe->add_option("--samples", probe_samples, "number of action samples");
  probe->add_option("--seed", probe_seed, "probe seed");
  probe->add_option("--out", probe_out, "directory for sample/trace dumps");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "grid sweep over whitelisted config keys");
  std::string sweep_config, sweep_grid, sweep_out = "runs/sweep";
  int sweep_seeds = 1;
  sweep->add_option("--config", sweep_config, "base config file")->required();
  sweep->add_option("--grid", sweep_grid, "grid spec: key=v1,v2;key2=w1,w2")->required();
  sweep->add_option("--seeds", sweep_seeds, "seeds per cell");
  sweep->add_option("--out", sweep_out, "sweep output directory");

  // print-config
  auto* print_cfg = app.add_subcommand("print-config", "print the full default configuration");
  std::string pc_env = "gridworld", pc_algo = "fpo";
  print_cfg->add_option("--env", pc_env, "environment preset");
  print_cfg->add_option("--algo", pc_algo, "algorithm preset");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      fpo::ConfigText text = fpo::ConfigText::parse_file(train_config);
      if (train_seed >= 0) text.set("run.seed", std::to_string(train_seed));
      if (!train_out.empty()) text.set("run.out_dir", "\"" + train_out + "\"");
      fpo::RunConfig cfg = fpo::RunConfig::load(std::move(text));
      fpo::Trainer trainer(cfg);
      fpo::TrainOutcome out = trainer.run();
      nlohmann::json j;
      j["checkpoint"] = out.checkpoint_path;
      j["metrics"] = out.metrics_path;
      j["batches"] = out.batches_run;
      j["env_steps"] = out.env_steps;
      j["final_eval"] = eval_json(out.final_eval);
      std::cout << j.dump() << "\n";
    } else if (*eval) {
      fpo::Checkpoint ckpt = fpo::Checkpoint::load(eval_ckpt);
      std::optional<fpo::SamplerCfg> override_cfg;
      if (!eval_sampler.empty() || eval_steps > 0) {
        fpo::SamplerCfg s = ckpt.sampler;
        if (!eval_sampler.empty()) s.method = fpo::sampler_from_name(eval_sampler);
        if (eval_steps > 0) s.n_steps = eval_steps;
        override_cfg = s;
      }
      fpo::EvalSummary ev = fpo::evaluate_checkpoint(ckpt, eval_env, eval_episodes, eval_seed, 0,
                                                      override_cfg, eval_csv, eval_probe_start);
      std::cout << eval_json(ev).dump() << "\n";
    } else if (*probe) {
      fpo::Checkpoint ckpt = fpo::Checkpoint::load(probe_ckpt);
      fpo::ModeReport rep =
          fpo::probe_checkpoint(ckpt, parse_state(probe_state), probe_samples, probe_seed, probe_out);
      nlohmann::json j;
      j["n_samples"] = rep.n_samples;
      j["n_modes"] = rep.n_modes;
      j["mass"] = {rep.mass_a, rep.mass_b};
      j["separation"] = rep.separation;
      j["spread"] = rep.spread;
      j["separation_ratio"] = rep.separation_ratio;
      j["dominant_mass"] = rep.dominant_mass;
      j["centroid_a"] = rep.centroid_a;
      j["centroid_b"] = rep.centroid_b;
      std::cout << j.dump() << "\n";
    } else if (*sweep) {
      std::ifstream in(sweep_config);
      if (!in) throw std::runtime_error("cannot open config file: " + sweep_config);
      std::ostringstream ss;
      ss << in.rdbuf();
      fpo::SweepResult res = fpo::run_sweep(ss.str(), sweep_grid, sweep_seeds, sweep_out);
      nlohmann::json j;
      j["cells"] = res.cells.size();
      j["csv"] = res.csv_path;
      std::cout << j.dump() << "\n";
    } else if (*print_cfg) {
      std::cout << fpo::RunConfig::defaults_for(pc_env, pc_algo).to_text();
    }
  } catch (const std::exception& e) {
    nlohmann::json err;
    err["error"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
