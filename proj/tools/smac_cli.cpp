// smac: train / eval / probe-bias / ablate for the safety-modulated
// actor-critic lab. See README.md for the run directory layout.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smac/config.hpp"
#include "smac/probes.hpp"
#include "smac/runner.hpp"

namespace fs = std::filesystem;

namespace {

nlohmann::json build_tree(const std::string& config_path, const std::vector<std::string>& sets,
                          std::optional<std::uint64_t> seed) {
  nlohmann::json tree =
      config_path.empty() ? smac::Config{}.to_json() : smac::load_config_tree(config_path);
  for (const auto& kv : sets) smac::apply_override(tree, kv);
  if (seed) tree["agent"]["seed"] = *seed;
  return tree;
}

fs::path output_root() {
  if (const char* env = std::getenv("SMAC_LAB_OUT")) return env;
  return "runs";
}

fs::path latest_checkpoint(const fs::path& run_dir) {
  std::vector<fs::path> ckpts;
  const fs::path dir = run_dir / "checkpoints";
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".ckpt") ckpts.push_back(e.path());
  if (ckpts.empty()) throw smac::FileError("no checkpoints under " + dir.string());
  std::sort(ckpts.begin(), ckpts.end());
  return ckpts.back();
}

// Networks restored from a run's manifest config plus its last checkpoint.
struct LoadedRun {
  smac::Config cfg;
  smac::SmacNetworks nets;
  long long step = 0;
};

LoadedRun load_run(const fs::path& run_dir) {
  const nlohmann::json manifest = smac::read_manifest(run_dir);
  smac::Config cfg = smac::Config::from_json(manifest.at("config"));
  auto env = cfg.make_env();
  LoadedRun out{cfg,
                smac::SmacNetworks::init(env->obs_dim(), env->action_dim(), cfg.agent.hidden, 0,
                                         cfg.agent.sigma_min, cfg.agent.log_std_min,
                                         cfg.agent.log_std_max),
                0};
  const smac::ParamStore combined = smac::load_checkpoint(latest_checkpoint(run_dir).string());
  smac::split_networks(combined, out.nets, nullptr);
  out.step = combined.step_count();
  return out;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              std::optional<std::uint64_t> seed, const std::string& out_flag) {
  const nlohmann::json tree = build_tree(config_path, sets, seed);
  fs::path run_dir;
  if (!out_flag.empty()) {
    run_dir = out_flag;
  } else {
    const auto seed_val = tree.at("agent").at("seed").get<std::uint64_t>();
    run_dir = output_root() /
              (smac::config_hash(tree).substr(0, 8) + "_seed" + std::to_string(seed_val));
  }
  const smac::RunArtifacts art = smac::run_training(tree, run_dir);
  std::cout << "run directory: " << art.dir.string() << "\n"
            << "episodes: " << art.result.episodes
            << "  final lambda: " << art.result.final_lambda << "\n"
            << "final 10-episode mean return: "
            << smac::tail_mean(art.result.episode_returns, 10)
            << "  mean cost: " << smac::tail_mean(art.result.episode_costs, 10) << "\n";
  return 0;
}

int cmd_eval(const std::string& run, int episodes, std::optional<std::uint64_t> seed) {
  if (episodes < 1) throw smac::UsageError("--episodes must be >= 1");
  const fs::path run_dir = run;
  LoadedRun loaded = load_run(run_dir);
  auto env = loaded.cfg.make_env();
  const std::uint64_t eval_seed = seed ? *seed : loaded.cfg.agent.seed + 1;
  const smac::EvalReport report =
      smac::evaluate(loaded.nets, loaded.cfg.agent.ablations, *env, episodes, eval_seed);

  nlohmann::json j = smac::eval_report_json(report);
  j["checkpoint_step"] = loaded.step;
  fs::create_directories(run_dir / "reports");
  const fs::path out = run_dir / "reports" /
                       ("eval_ep" + std::to_string(episodes) + "_seed" +
                        std::to_string(eval_seed) + ".json");
  std::ofstream f(out);
  f << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_probe_bias(const std::string& run) {
  const fs::path run_dir = run;
  const nlohmann::json manifest = smac::read_manifest(run_dir);
  smac::Config cfg = smac::Config::from_json(manifest.at("config"));

  std::vector<fs::path> ckpts;
  if (fs::is_directory(run_dir / "checkpoints"))
    for (const auto& e : fs::directory_iterator(run_dir / "checkpoints"))
      if (e.path().extension() == ".ckpt") ckpts.push_back(e.path());
  if (ckpts.size() < 2)
    throw smac::UsageError("probe-bias needs at least 2 checkpoints, found " +
                           std::to_string(ckpts.size()));

  auto env = cfg.make_env();
  smac::SmacNetworks nets =
      smac::SmacNetworks::init(env->obs_dim(), env->action_dim(), cfg.agent.hidden, 0,
                               cfg.agent.sigma_min, cfg.agent.log_std_min, cfg.agent.log_std_max);
  smac::BiasProbeMeta meta;
  const auto curve =
      smac::bias_curve(run_dir / "checkpoints", nets, cfg.agent.ablations, *env, cfg.agent.gamma,
                       cfg.probes, cfg.agent.seed + 101, &meta);

  fs::create_directories(run_dir / "reports");
  smac::write_bias_csv(run_dir / "reports" / "bias_curve.csv", curve);
  nlohmann::json mj = {{"probe_step", meta.probe_step},
                       {"episodes", meta.episodes},
                       {"n_rollouts", meta.n_rollouts},
                       {"horizon", meta.horizon}};
  std::ofstream mf(run_dir / "reports" / "bias_curve_meta.json");
  mf << mj.dump(2) << "\n";
  std::cout << "wrote " << (run_dir / "reports" / "bias_curve.csv").string() << " ("
            << curve.size() << " checkpoints)\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& sets, int n_seeds,
               int jobs, const std::string& out_flag) {
  const nlohmann::json tree = build_tree(config_path, sets, std::nullopt);
  const fs::path out_dir =
      out_flag.empty() ? output_root() / ("ablate_" + smac::config_hash(tree).substr(0, 8))
                       : fs::path(out_flag);
  fs::create_directories(out_dir);
  const auto rows = smac::run_ablation(tree, n_seeds, out_dir, jobs);
  smac::write_ablation_csv(out_dir / "summary.csv", rows);
  std::cout << "wrote " << (out_dir / "summary.csv").string() << "\n";
  for (const std::string variant : {"smac", "saclag", "sac"}) {
    double ret = 0, cost = 0;
    int n = 0;
    for (const auto& r : rows)
      if (r.variant == variant) {
        ret += r.mean_return;
        cost += r.mean_cost;
        ++n;
      }
    if (n > 0)
      std::cout << variant << ": mean return " << ret / n << ", mean episode cost " << cost / n
                << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"safety-modulated actor-critic lab"};
  app.require_subcommand(1);

  std::string config_path, run_dir, out_flag;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  int episodes = 10;
  int n_seeds = 5;
  int jobs = 1;

  auto add_config_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config JSON (defaults: paper-scale quad2d)");
    cmd->add_option("--set", sets, "override, e.g. --set agent.total_steps=1000")->take_all();
  };

  CLI::App* train = app.add_subcommand("train", "train one run");
  add_config_flags(train);
  train->add_option("--seed", seed, "override agent.seed");
  train->add_option("--out", out_flag, "run directory (default: under $SMAC_LAB_OUT or ./runs)");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a trained run");
  eval->add_option("--run", run_dir, "run directory")->required();
  eval->add_option("--episodes", episodes, "evaluation episodes");
  eval->add_option("--seed", seed, "evaluation seed (default: train seed + 1)");

  CLI::App* probe = app.add_subcommand("probe-bias", "bias curve over a run's checkpoints");
  probe->add_option("--run", run_dir, "run directory")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "compare smac/saclag/sac over seeds");
  add_config_flags(ablate);
  ablate->add_option("--seeds", n_seeds, "seeds per variant");
  ablate->add_option("--jobs", jobs, "parallel runs");
  ablate->add_option("--out", out_flag, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(config_path, sets, seed, out_flag);
    if (eval->parsed()) return cmd_eval(run_dir, episodes, seed);
    if (probe->parsed()) return cmd_probe_bias(run_dir);
    if (ablate->parsed()) return cmd_ablate(config_path, sets, n_seeds, jobs, out_flag);
  } catch (const smac::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const smac::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
