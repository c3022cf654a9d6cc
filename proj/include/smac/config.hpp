#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>

#include <json.hpp>

#include "smac/agent.hpp"
#include "smac/envs.hpp"
#include "smac/probes.hpp"

namespace smac {

// Full lab configuration: environment selection plus both environment
// parameter sets, the training parameters, run bookkeeping and probe knobs.
// JSON is the on-disk format; unknown keys are rejected with the list of
// valid keys, and dotted-path overrides edit the merged tree.
struct Config {
  std::string env_name = "quad2d";
  IntegratorConfig integrator;
  Quad2dConfig quad2d;
  TrainConfig agent;
  long long checkpoint_every = 100000;
  long long metrics_every = 1000;
  int eval_episodes = 10;
  ProbeConfig probes;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["env"]["name"] = env_name;
    auto& ji = j["env"]["integrator"];
    ji["dt"] = integrator.dt;
    ji["episode_steps"] = integrator.episode_steps;
    ji["u_max"] = integrator.u_max;
    ji["v_limit"] = integrator.v_limit;
    ji["start_dist_min"] = integrator.start_dist_min;
    ji["start_dist_max"] = integrator.start_dist_max;
    ji["p_bound"] = integrator.p_bound;
    ji["v_bound"] = integrator.v_bound;
    auto& jq = j["env"]["quad2d"];
    jq["dt"] = quad2d.dt;
    jq["episode_steps"] = quad2d.episode_steps;
    jq["u_max"] = quad2d.u_max;
    jq["hover_height"] = quad2d.hover_height;
    jq["mass"] = quad2d.mass;
    jq["gravity"] = quad2d.gravity;
    jq["inertia"] = quad2d.inertia;
    jq["thrust_to_weight"] = quad2d.thrust_to_weight;
    jq["angle_limit"] = quad2d.angle_limit;
    jq["stay_radius"] = quad2d.stay_radius;
    jq["box_x"] = quad2d.box_x;
    jq["box_z_lo"] = quad2d.box_z_lo;
    jq["box_z_hi"] = quad2d.box_z_hi;
    jq["kp"] = quad2d.kp;
    jq["kd"] = quad2d.kd;
    jq["max_pitch_cmd"] = quad2d.max_pitch_cmd;
    jq["literal_cost_direction"] = quad2d.literal_cost_direction;
    jq["terminate_on_hit"] = quad2d.terminate_on_hit;
    auto& ja = j["agent"];
    ja["gamma"] = agent.gamma;
    ja["tau"] = agent.tau;
    ja["batch_size"] = agent.batch_size;
    ja["total_steps"] = agent.total_steps;
    ja["start_learning_step"] = agent.start_learning_step;
    ja["lr_policy"] = agent.lr_policy;
    ja["lr_modulator"] = agent.lr_modulator;
    ja["lr_critic"] = agent.lr_critic;
    ja["lr_cost_critic"] = agent.lr_cost_critic;
    ja["lr_lambda"] = agent.lr_lambda;
    ja["sigma_min"] = agent.sigma_min;
    ja["zeta"] = agent.zeta;
    ja["hidden"] = agent.hidden;
    ja["log_std_min"] = agent.log_std_min;
    ja["log_std_max"] = agent.log_std_max;
    ja["entropy_coef"] = agent.entropy_coef;
    ja["constraint_budget"] = agent.constraint_budget;
    ja["lambda_init"] = agent.lambda_init;
    ja["lambda_update_every_k"] = agent.lambda_update_every_k;
    ja["cost_discount"] = agent.cost_discount;
    ja["buffer_capacity"] = agent.buffer_capacity;
    ja["seed"] = agent.seed;
    auto& jab = ja["ablations"];
    jab["disable_modulator"] = agent.ablations.disable_modulator;
    jab["disable_distributional"] = agent.ablations.disable_distributional;
    if (agent.ablations.lambda_fixed)
      jab["lambda_fixed"] = *agent.ablations.lambda_fixed;
    else
      jab["lambda_fixed"] = nullptr;
    auto& jr = j["run"];
    jr["checkpoint_every"] = checkpoint_every;
    jr["metrics_every"] = metrics_every;
    jr["eval_episodes"] = eval_episodes;
    auto& jp = j["probes"];
    jp["n_rollouts"] = probes.n_rollouts;
    jp["mc_tolerance"] = probes.mc_tolerance;
    jp["eval_episodes"] = probes.eval_episodes;
    return j;
  }

  // Reads a fully-merged tree (defaults overlaid with user values).
  static Config from_json(const nlohmann::json& j) {
    Config c;
    c.env_name = j.at("env").at("name").get<std::string>();
    if (c.env_name != "integrator" && c.env_name != "quad2d")
      throw UsageError("env.name must be \"integrator\" or \"quad2d\", got \"" + c.env_name +
                       "\"");
    const auto& ji = j.at("env").at("integrator");
    c.integrator.dt = ji.at("dt").get<double>();
    c.integrator.episode_steps = ji.at("episode_steps").get<int>();
    c.integrator.u_max = ji.at("u_max").get<double>();
    c.integrator.v_limit = ji.at("v_limit").get<double>();
    c.integrator.start_dist_min = ji.at("start_dist_min").get<double>();
    c.integrator.start_dist_max = ji.at("start_dist_max").get<double>();
    c.integrator.p_bound = ji.at("p_bound").get<double>();
    c.integrator.v_bound = ji.at("v_bound").get<double>();
    const auto& jq = j.at("env").at("quad2d");
    c.quad2d.dt = jq.at("dt").get<double>();
    c.quad2d.episode_steps = jq.at("episode_steps").get<int>();
    c.quad2d.u_max = jq.at("u_max").get<double>();
    c.quad2d.hover_height = jq.at("hover_height").get<double>();
    c.quad2d.mass = jq.at("mass").get<double>();
    c.quad2d.gravity = jq.at("gravity").get<double>();
    c.quad2d.inertia = jq.at("inertia").get<double>();
    c.quad2d.thrust_to_weight = jq.at("thrust_to_weight").get<double>();
    c.quad2d.angle_limit = jq.at("angle_limit").get<double>();
    c.quad2d.stay_radius = jq.at("stay_radius").get<double>();
    c.quad2d.box_x = jq.at("box_x").get<double>();
    c.quad2d.box_z_lo = jq.at("box_z_lo").get<double>();
    c.quad2d.box_z_hi = jq.at("box_z_hi").get<double>();
    c.quad2d.kp = jq.at("kp").get<double>();
    c.quad2d.kd = jq.at("kd").get<double>();
    c.quad2d.max_pitch_cmd = jq.at("max_pitch_cmd").get<double>();
    c.quad2d.literal_cost_direction = jq.at("literal_cost_direction").get<bool>();
    c.quad2d.terminate_on_hit = jq.at("terminate_on_hit").get<bool>();
    const auto& ja = j.at("agent");
    c.agent.gamma = ja.at("gamma").get<double>();
    c.agent.tau = ja.at("tau").get<double>();
    c.agent.batch_size = ja.at("batch_size").get<int>();
    c.agent.total_steps = ja.at("total_steps").get<long long>();
    c.agent.start_learning_step = ja.at("start_learning_step").get<long long>();
    c.agent.lr_policy = ja.at("lr_policy").get<double>();
    c.agent.lr_modulator = ja.at("lr_modulator").get<double>();
    c.agent.lr_critic = ja.at("lr_critic").get<double>();
    c.agent.lr_cost_critic = ja.at("lr_cost_critic").get<double>();
    c.agent.lr_lambda = ja.at("lr_lambda").get<double>();
    c.agent.sigma_min = ja.at("sigma_min").get<double>();
    c.agent.zeta = ja.at("zeta").get<double>();
    c.agent.hidden = ja.at("hidden").get<std::vector<int>>();
    c.agent.log_std_min = ja.at("log_std_min").get<double>();
    c.agent.log_std_max = ja.at("log_std_max").get<double>();
    c.agent.entropy_coef = ja.at("entropy_coef").get<double>();
    c.agent.constraint_budget = ja.at("constraint_budget").get<double>();
    c.agent.lambda_init = ja.at("lambda_init").get<double>();
    c.agent.lambda_update_every_k = ja.at("lambda_update_every_k").get<long long>();
    c.agent.cost_discount = ja.at("cost_discount").get<double>();
    c.agent.buffer_capacity = ja.at("buffer_capacity").get<std::size_t>();
    c.agent.seed = ja.at("seed").get<std::uint64_t>();
    const auto& jab = ja.at("ablations");
    c.agent.ablations.disable_modulator = jab.at("disable_modulator").get<bool>();
    c.agent.ablations.disable_distributional = jab.at("disable_distributional").get<bool>();
    if (jab.at("lambda_fixed").is_null())
      c.agent.ablations.lambda_fixed.reset();
    else
      c.agent.ablations.lambda_fixed = jab.at("lambda_fixed").get<double>();
    const auto& jr = j.at("run");
    c.checkpoint_every = jr.at("checkpoint_every").get<long long>();
    c.metrics_every = jr.at("metrics_every").get<long long>();
    c.eval_episodes = jr.at("eval_episodes").get<int>();
    const auto& jp = j.at("probes");
    c.probes.n_rollouts = jp.at("n_rollouts").get<int>();
    c.probes.mc_tolerance = jp.at("mc_tolerance").get<double>();
    c.probes.eval_episodes = jp.at("eval_episodes").get<int>();

    c.agent.validate();
    if (c.env_name == "integrator")
      c.integrator.validate();
    else
      c.quad2d.validate();
    return c;
  }

  std::unique_ptr<Env> make_env() const {
    if (env_name == "integrator") return std::make_unique<IntegratorEnv>(integrator);
    return std::make_unique<Quad2dEnv>(quad2d);
  }
};

namespace detail {

inline std::string key_list(const nlohmann::json& obj, const std::string& prefix) {
  std::string out;
  for (const auto& [k, v] : obj.items()) {
    if (!out.empty()) out += ", ";
    out += prefix + k;
  }
  return out;
}

inline bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return true;
  if (a.is_null() || b.is_null()) return a.is_number() || b.is_number() || (a.is_null() && b.is_null());
  return a.type() == b.type();
}

}  // namespace detail

// Overlays user values onto the default tree, rejecting unknown keys and
// kind mismatches. The lambda_fixed null <-> number transition is legal.
inline void merge_config(nlohmann::json& base, const nlohmann::json& user,
                         const std::string& path = "") {
  if (!user.is_object()) throw UsageError("config section " + path + " must be an object");
  for (const auto& [k, v] : user.items()) {
    if (!base.contains(k))
      throw UsageError("unknown config key \"" + path + k + "\"; valid keys here: " +
                       detail::key_list(base, path));
    if (base[k].is_object()) {
      merge_config(base[k], v, path + k + ".");
    } else {
      if (!detail::same_kind(base[k], v))
        throw UsageError("config key \"" + path + k + "\" has the wrong type");
      base[k] = v;
    }
  }
}

// Applies a dotted-path override like "agent.total_steps=1000". Values parse
// as JSON scalars when possible and fall back to strings.
inline void apply_override(nlohmann::json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("override must look like section.key=value, got \"" + assignment + "\"");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  nlohmann::json* node = &tree;
  std::string walked;
  std::size_t begin = 0;
  while (true) {
    const auto dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot == std::string::npos ? dot : dot - begin);
    if (!node->contains(key))
      throw UsageError("unknown config key \"" + walked + key + "\"; valid keys here: " +
                       detail::key_list(*node, walked));
    node = &(*node)[key];
    walked += key + ".";
    if (dot == std::string::npos) break;
    begin = dot + 1;
  }
  if (node->is_object()) throw UsageError("cannot assign to config section \"" + path + "\"");

  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // plain string
  if (!detail::same_kind(*node, value))
    throw UsageError("override \"" + path + "\" has the wrong type");
  *node = value;
}

inline nlohmann::json load_config_tree(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open config file: " + path);
  nlohmann::json user = nlohmann::json::parse(in, nullptr, false);
  if (user.is_discarded()) throw UsageError("config file is not valid JSON: " + path);
  nlohmann::json tree = Config{}.to_json();
  merge_config(tree, user);
  return tree;
}

// FNV-1a over the canonical (key-sorted, compact) serialization.
inline std::string config_hash(const nlohmann::json& tree) {
  const std::string s = tree.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace smac
