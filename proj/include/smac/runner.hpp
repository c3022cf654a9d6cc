#pragma once

#include <atomic>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "smac/config.hpp"
#include "smac/probes.hpp"
#include "smac/trainer.hpp"

namespace smac {

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Run directory layout: manifest.json, metrics.csv, checkpoints/step_*.ckpt,
// reports/. The manifest snapshots the exact merged config, so any run can
// be reproduced or re-opened by the eval/probe commands.
inline void write_manifest(const std::filesystem::path& run_dir, const nlohmann::json& cfg_tree,
                           const std::string& started_at, const std::string& finished_at,
                           const std::string& status, const TrainResult* result) {
  nlohmann::json m;
  m["config"] = cfg_tree;
  m["config_hash"] = config_hash(cfg_tree);
  m["seed"] = cfg_tree.at("agent").at("seed");
  m["started_at"] = started_at;
  m["finished_at"] = finished_at;
  m["status"] = status;
  m["layout"] = {{"metrics", "metrics.csv"},
                 {"checkpoints", "checkpoints"},
                 {"reports", "reports"}};
  if (result) {
    m["episodes"] = result->episodes;
    m["final_lambda"] = result->final_lambda;
    m["invariant_violations"] = {
        {"lambda_negative", result->monitor.lambda_negative},
        {"sigma_below_min", result->monitor.sigma_below_min},
        {"delta_out_of_bound", result->monitor.delta_out_of_bound},
        {"risky_touched_by_modulator_update",
         result->monitor.risky_touched_by_modulator_update},
        {"modulator_touched_by_risky_update",
         result->monitor.modulator_touched_by_risky_update},
    };
  }
  std::ofstream out(run_dir / "manifest.json");
  if (!out) throw FileError("cannot write manifest in " + run_dir.string());
  out << m.dump(2) << "\n";
}

inline nlohmann::json read_manifest(const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "manifest.json");
  if (!in) throw FileError("no manifest.json in " + run_dir.string());
  nlohmann::json m = nlohmann::json::parse(in, nullptr, false);
  if (m.is_discarded()) throw FileError("manifest.json is not valid JSON in " + run_dir.string());
  return m;
}

struct RunArtifacts {
  std::filesystem::path dir;
  TrainResult result;
};

// Trains one run into run_dir. A fresh directory is required: prior runs are
// never mutated. On divergence the manifest records the abort before the
// error propagates.
inline RunArtifacts run_training(const nlohmann::json& cfg_tree,
                                 const std::filesystem::path& run_dir) {
  const Config cfg = Config::from_json(cfg_tree);
  if (std::filesystem::exists(run_dir / "manifest.json"))
    throw UsageError("run directory already holds a run: " + run_dir.string());
  std::filesystem::create_directories(run_dir);
  std::filesystem::create_directories(run_dir / "checkpoints");
  std::filesystem::create_directories(run_dir / "reports");

  const std::string started = utc_timestamp();
  write_manifest(run_dir, cfg_tree, started, "", "running", nullptr);

  Trainer trainer(cfg.agent, cfg.make_env());
  trainer.set_metrics_path((run_dir / "metrics.csv").string());
  trainer.set_metrics_every(cfg.metrics_every);
  trainer.set_checkpoint_dir(run_dir / "checkpoints", cfg.checkpoint_every);

  RunArtifacts out;
  out.dir = run_dir;
  try {
    out.result = trainer.run();
  } catch (const DivergenceError&) {
    write_manifest(run_dir, cfg_tree, started, utc_timestamp(), "diverged", nullptr);
    throw;
  }
  write_manifest(run_dir, cfg_tree, started, utc_timestamp(), "completed", &out.result);
  return out;
}

// ------------------------------------------------------------------ ablate

struct AblateRow {
  std::string variant;
  std::uint64_t seed = 0;
  double mean_return = 0.0;
  double mean_cost = 0.0;
  double terminal_bias = 0.0;
};

inline double tail_mean(const std::vector<double>& v, std::size_t n) {
  if (v.empty()) return 0.0;
  const std::size_t k = std::min(n, v.size());
  double s = 0.0;
  for (std::size_t i = v.size() - k; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(k);
}

inline nlohmann::json ablation_variant_tree(const nlohmann::json& base,
                                            const std::string& variant) {
  nlohmann::json t = base;
  auto& ab = t["agent"]["ablations"];
  if (variant == "smac") {
    ab["disable_modulator"] = false;
    ab["lambda_fixed"] = nullptr;
  } else if (variant == "saclag") {
    ab["disable_modulator"] = true;
    ab["lambda_fixed"] = nullptr;
  } else if (variant == "sac") {
    ab["disable_modulator"] = true;
    ab["lambda_fixed"] = 0.0;
  } else if (variant == "nodist") {
    ab["disable_distributional"] = true;
  } else {
    throw ContractError("unknown ablation variant " + variant);
  }
  return t;
}

// Trains one variant/seed pair and measures its terminal statistics. The
// terminal bias probes the final checkpoint against a Monte-Carlo return.
inline AblateRow run_variant(const nlohmann::json& base_tree, const std::string& variant,
                             std::uint64_t seed, const std::filesystem::path& dir) {
  nlohmann::json tree = ablation_variant_tree(base_tree, variant);
  tree["agent"]["seed"] = seed;
  const RunArtifacts art = run_training(tree, dir);
  const Config cfg = Config::from_json(tree);

  AblateRow row;
  row.variant = variant;
  row.seed = seed;
  row.mean_return = tail_mean(art.result.episode_returns, 10);
  row.mean_cost = tail_mean(art.result.episode_costs, 10);

  auto env = cfg.make_env();
  SmacNetworks nets = SmacNetworks::init(env->obs_dim(), env->action_dim(), cfg.agent.hidden, 0,
                                         cfg.agent.sigma_min, cfg.agent.log_std_min,
                                         cfg.agent.log_std_max);
  std::vector<std::filesystem::path> ckpts;
  for (const auto& e : std::filesystem::directory_iterator(dir / "checkpoints"))
    if (e.path().extension() == ".ckpt") ckpts.push_back(e.path());
  std::sort(ckpts.begin(), ckpts.end());
  if (!ckpts.empty()) {
    const ParamStore combined = load_checkpoint(ckpts.back().string());
    split_networks(combined, nets, nullptr);
    const BiasSample s = bias_sample(nets, cfg.agent.ablations, *env, cfg.agent.gamma,
                                     cfg.probes, cfg.agent.seed + 101, combined.step_count(),
                                     nullptr);
    row.terminal_bias = s.bias;
  }
  return row;
}

// Three-variant comparison over n_seeds seeded runs each. Runs have fully
// disjoint state, so they may execute on a small thread pool.
inline std::vector<AblateRow> run_ablation(const nlohmann::json& base_tree, int n_seeds,
                                           const std::filesystem::path& out_dir, int jobs) {
  struct Job {
    std::string variant;
    std::uint64_t seed;
    std::filesystem::path dir;
  };
  std::vector<Job> todo;
  for (const std::string variant : {"smac", "saclag", "sac"})
    for (int s = 0; s < n_seeds; ++s)
      todo.push_back(
          {variant, static_cast<std::uint64_t>(s),
           out_dir / (variant + "_seed" + std::to_string(s))});

  std::vector<AblateRow> rows(todo.size());
  std::vector<std::string> errors(todo.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= todo.size()) return;
      try {
        rows[i] = run_variant(base_tree, todo[i].variant, todo[i].seed, todo[i].dir);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(todo.size())));
  std::vector<std::thread> pool;
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < todo.size(); ++i)
    if (!errors[i].empty())
      throw Error("ablation run " + todo[i].variant + " seed " +
                  std::to_string(todo[i].seed) + " failed: " + errors[i]);
  return rows;
}

// 3 x n_seeds per-run rows plus one summary row per variant. The summary
// bias column is the mean of |bias| across seeds.
inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblateRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write " + path.string());
  out << "variant,seed,mean_return,mean_cost,terminal_bias\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%llu,%.17g,%.17g,%.17g\n", r.variant.c_str(),
                  static_cast<unsigned long long>(r.seed), r.mean_return, r.mean_cost,
                  r.terminal_bias);
    out << buf;
  }
  for (const std::string variant : {"smac", "saclag", "sac"}) {
    double ret = 0, cost = 0, bias = 0;
    int n = 0;
    for (const auto& r : rows)
      if (r.variant == variant) {
        ret += r.mean_return;
        cost += r.mean_cost;
        bias += std::abs(r.terminal_bias);
        ++n;
      }
    if (n == 0) continue;
    std::snprintf(buf, sizeof(buf), "%s,mean,%.17g,%.17g,%.17g\n", variant.c_str(), ret / n,
                  cost / n, bias / n);
    out << buf;
  }
}

}  // namespace smac
