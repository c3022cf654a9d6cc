#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "smac/config.hpp"
#include "smac/metrics.hpp"
#include "smac/runner.hpp"

using namespace smac;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "smac_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

fs::path repo_config(const std::string& name) {
  // CTest runs from build/tests; fall back to the source-relative path.
  for (const char* prefix : {"../../configs/", "configs/", "../configs/"}) {
    fs::path p = fs::path(prefix) / name;
    if (fs::exists(p)) return p;
  }
  throw std::runtime_error("cannot locate configs/" + name);
}

nlohmann::json fast_tree() {
  nlohmann::json tree = Config{}.to_json();
  tree["env"]["name"] = "integrator";
  tree["env"]["integrator"]["episode_steps"] = 50;
  tree["agent"]["hidden"] = {8, 8};
  tree["agent"]["batch_size"] = 16;
  tree["agent"]["total_steps"] = 400;
  tree["agent"]["start_learning_step"] = 100;
  tree["agent"]["buffer_capacity"] = 10000;
  tree["agent"]["constraint_budget"] = 5.0;
  tree["agent"]["lambda_update_every_k"] = 50;
  tree["run"]["checkpoint_every"] = 200;
  return tree;
}

}  // namespace

TEST_CASE("config round-trips through json exactly", "[config]") {
  Config def;
  const nlohmann::json j = def.to_json();
  const Config back = Config::from_json(j);
  CHECK(back.to_json() == j);

  // And through a modified tree.
  nlohmann::json t = j;
  t["agent"]["gamma"] = 0.95;
  t["agent"]["ablations"]["lambda_fixed"] = 0.5;
  t["env"]["name"] = "integrator";
  const Config c2 = Config::from_json(t);
  CHECK(c2.agent.gamma == 0.95);
  REQUIRE(c2.agent.ablations.lambda_fixed.has_value());
  CHECK(*c2.agent.ablations.lambda_fixed == 0.5);
  CHECK(c2.to_json() == t);
}

TEST_CASE("unknown keys are rejected with the valid key list", "[config]") {
  nlohmann::json base = Config{}.to_json();
  nlohmann::json bad = {{"agent", {{"gama", 0.9}}}};
  try {
    merge_config(base, bad);
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("agent.gama") != std::string::npos);
    CHECK(msg.find("agent.gamma") != std::string::npos);
  }
}

TEST_CASE("type mismatches are rejected", "[config]") {
  nlohmann::json base = Config{}.to_json();
  nlohmann::json bad = {{"agent", {{"gamma", "high"}}}};
  CHECK_THROWS_AS(merge_config(base, bad), UsageError);
}

TEST_CASE("dotted overrides edit the tree", "[config]") {
  nlohmann::json tree = Config{}.to_json();
  apply_override(tree, "agent.total_steps=1000");
  CHECK(tree["agent"]["total_steps"] == 1000);
  apply_override(tree, "agent.ablations.disable_modulator=true");
  CHECK(tree["agent"]["ablations"]["disable_modulator"] == true);
  apply_override(tree, "agent.ablations.lambda_fixed=0.5");
  CHECK(tree["agent"]["ablations"]["lambda_fixed"] == 0.5);
  apply_override(tree, "agent.ablations.lambda_fixed=null");
  CHECK(tree["agent"]["ablations"]["lambda_fixed"].is_null());
  apply_override(tree, "env.name=integrator");
  CHECK(tree["env"]["name"] == "integrator");

  CHECK_THROWS_AS(apply_override(tree, "agent.nope=3"), UsageError);
  CHECK_THROWS_AS(apply_override(tree, "agent=3"), UsageError);
  CHECK_THROWS_AS(apply_override(tree, "no_equals"), UsageError);
  const Config cfg = Config::from_json(tree);
  CHECK(cfg.agent.total_steps == 1000);
}

TEST_CASE("the default configuration is the paper-scale profile", "[config]") {
  const Config def;
  CHECK(def.agent.gamma == 0.99);
  CHECK(def.agent.tau == 5e-3);
  CHECK(def.agent.batch_size == 512);
  CHECK(def.agent.buffer_capacity == 1000000u);
  CHECK(def.agent.total_steps == 5000000);
  CHECK(def.agent.start_learning_step == 100);
  CHECK(def.agent.constraint_budget == 50.0);
  CHECK(def.agent.lr_critic == 1e-4);
  CHECK(def.agent.hidden == std::vector<int>{256, 256});
  CHECK(def.agent.zeta == 3.0);
  CHECK(def.agent.sigma_min == 1.0);
  CHECK(def.quad2d.episode_steps == 1000);
  CHECK(def.quad2d.dt == 1.0 / 240.0);
  CHECK(def.quad2d.thrust_to_weight == 1.88);
  CHECK(def.quad2d.hover_height == 1.5);
  CHECK(def.quad2d.angle_limit == 0.2);
  CHECK(def.quad2d.stay_radius == 0.02);
}

TEST_CASE("shipped profiles parse and match their scale", "[config]") {
  const Config paper = Config::from_json(load_config_tree(repo_config("quad2d_paper.json").string()));
  CHECK(paper.env_name == "quad2d");
  CHECK(paper.to_json() == Config{}.to_json());  // the defaults are paper scale

  const Config desk =
      Config::from_json(load_config_tree(repo_config("integrator_desk.json").string()));
  CHECK(desk.env_name == "integrator");
  CHECK(desk.agent.hidden == std::vector<int>{64, 64});
  CHECK(desk.agent.total_steps == 30000);
  CHECK(desk.integrator.episode_steps == 200);
}

TEST_CASE("config hash is stable and value-sensitive", "[config]") {
  nlohmann::json a = Config{}.to_json();
  nlohmann::json b = Config{}.to_json();
  CHECK(config_hash(a) == config_hash(b));
  b["agent"]["seed"] = 99;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("runner writes the full run layout", "[config]") {
  const auto dir = tmp_dir("runner_layout");
  const auto run_dir = dir / "run";
  const RunArtifacts art = run_training(fast_tree(), run_dir);
  CHECK(fs::exists(run_dir / "manifest.json"));
  CHECK(fs::exists(run_dir / "metrics.csv"));
  CHECK(fs::exists(run_dir / "checkpoints" / "step_00000200.ckpt"));
  CHECK(fs::exists(run_dir / "checkpoints" / "step_00000400.ckpt"));
  CHECK(art.result.episodes == 8);

  const nlohmann::json m = read_manifest(run_dir);
  CHECK(m.at("status") == "completed");
  CHECK(m.at("config").at("agent").at("total_steps") == 400);
  CHECK(m.at("config_hash") == config_hash(fast_tree()));
  CHECK(m.at("invariant_violations").at("lambda_negative") == 0);

  // A prior run's directory is never reused.
  CHECK_THROWS_AS(run_training(fast_tree(), run_dir), UsageError);
}

TEST_CASE("identical manifest hashes imply identical metrics", "[config]") {
  const auto dir = tmp_dir("runner_determinism");
  run_training(fast_tree(), dir / "a");
  run_training(fast_tree(), dir / "b");
  CHECK(read_manifest(dir / "a").at("config_hash") == read_manifest(dir / "b").at("config_hash"));
  CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
}

// ------------------------------------------------------------- CLI binary

namespace {

int run_cli(const std::string& args) {
  const char* bin = std::getenv("SMAC_CLI_BIN");
  REQUIRE(bin != nullptr);
  const std::string cmd = std::string(bin) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string fast_overrides() {
  return "--set env.name=integrator --set env.integrator.episode_steps=50"
         " --set agent.hidden=[8,8] --set agent.batch_size=16"
         " --set agent.total_steps=400 --set agent.start_learning_step=100"
         " --set agent.buffer_capacity=10000 --set agent.constraint_budget=5.0"
         " --set agent.lambda_update_every_k=50 --set run.checkpoint_every=200";
}

}  // namespace

TEST_CASE("cli trains, evaluates and probes a run", "[config][cli]") {
  if (!std::getenv("SMAC_CLI_BIN")) SKIP("SMAC_CLI_BIN not set");
  const auto dir = tmp_dir("cli_roundtrip");
  const auto run = dir / "run";

  REQUIRE(run_cli("train " + fast_overrides() + " --out " + run.string()) == 0);
  CHECK(fs::exists(run / "metrics.csv"));

  // Training into the same directory again is refused.
  CHECK(run_cli("train " + fast_overrides() + " --out " + run.string()) == 2);

  // Unknown override key.
  CHECK(run_cli("train --set agent.gama=1 --out " + (dir / "x").string()) == 2);

  // Evaluation writes a report; zero episodes is a usage error.
  REQUIRE(run_cli("eval --run " + run.string() + " --episodes 3 --seed 5") == 0);
  const auto report = run / "reports" / "eval_ep3_seed5.json";
  REQUIRE(fs::exists(report));
  const std::string first = slurp(report);
  REQUIRE(run_cli("eval --run " + run.string() + " --episodes 3 --seed 5") == 0);
  CHECK(slurp(report) == first);
  CHECK(run_cli("eval --run " + run.string() + " --episodes 0") == 2);

  // Bias probe over the two checkpoints; rerun overwrites idempotently.
  REQUIRE(run_cli("probe-bias --run " + run.string()) == 0);
  const auto csv = run / "reports" / "bias_curve.csv";
  REQUIRE(fs::exists(csv));
  const std::string bias_first = slurp(csv);
  CHECK(bias_first.substr(0, bias_first.find('\n')) == "step,estimated_q,true_q,bias");
  REQUIRE(run_cli("probe-bias --run " + run.string()) == 0);
  CHECK(slurp(csv) == bias_first);

  // CSV rows: header + one per checkpoint.
  const auto rows = std::count(bias_first.begin(), bias_first.end(), '\n');
  CHECK(rows == 3);
}

TEST_CASE("cli refuses a bias probe with fewer than two checkpoints", "[config][cli]") {
  if (!std::getenv("SMAC_CLI_BIN")) SKIP("SMAC_CLI_BIN not set");
  const auto dir = tmp_dir("cli_single_ckpt");
  const auto run = dir / "run";
  REQUIRE(run_cli("train " + fast_overrides() + " --set run.checkpoint_every=100000 --out " +
                  run.string()) == 0);
  CHECK(run_cli("probe-bias --run " + run.string()) == 2);
}

TEST_CASE("cli train determinism across directories", "[config][cli]") {
  if (!std::getenv("SMAC_CLI_BIN")) SKIP("SMAC_CLI_BIN not set");
  const auto dir = tmp_dir("cli_determinism");
  REQUIRE(run_cli("train " + fast_overrides() + " --out " + (dir / "a").string()) == 0);
  REQUIRE(run_cli("train " + fast_overrides() + " --out " + (dir / "b").string()) == 0);
  CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
}
