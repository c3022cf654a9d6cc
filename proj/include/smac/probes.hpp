#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "smac/agent.hpp"
#include "smac/envs.hpp"
#include "smac/trainer.hpp"

namespace smac {

struct ProbeConfig {
  int n_rollouts = 20;
  double mc_tolerance = 0.01;
  int eval_episodes = 5;
};

// Deterministic composed policy over loaded networks.
class SafePolicy {
 public:
  SafePolicy(const SmacNetworks& nets, double u_max, AblationFlags flags)
      : nets_(&nets), u_max_(u_max), flags_(flags) {}

  std::vector<double> act(std::span<const double> obs, MlpWorkspace& ws) const {
    return smac_act(*nets_, obs, u_max_, /*deterministic=*/true, nullptr, flags_, ws).u;
  }

 private:
  const SmacNetworks* nets_;
  double u_max_;
  AblationFlags flags_;
};

// Smallest horizon with gamma^H * r_max / (1 - gamma) below the tolerance.
inline long long mc_horizon(double gamma, double r_max, double tol) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ContractError("mc_horizon: gamma must be in (0,1)");
  const double target = tol * (1.0 - gamma) / std::max(r_max, 1e-12);
  return static_cast<long long>(std::ceil(std::log(target) / std::log(gamma)));
}

// Discounted return of taking probe_action in the probed state and then
// following the policy, averaged over n_rollouts. Episode step limits are
// ignored: the dynamics simply keep running to the horizon.
inline double true_q_monte_carlo(const Env& probe_env, std::span<const double> probe_action,
                                 const SafePolicy& policy, double gamma, int n_rollouts,
                                 long long horizon) {
  MlpWorkspace ws;
  double total = 0.0;
  for (int k = 0; k < n_rollouts; ++k) {
    auto env = probe_env.clone();
    double ret = 0.0, disc = 1.0;
    CmdpStep s = env->step(probe_action);
    ret += s.reward;
    disc *= gamma;
    for (long long t = 1; t < horizon; ++t) {
      const auto u = policy.act(s.next_obs, ws);
      s = env->step(u);
      ret += disc * s.reward;
      disc *= gamma;
    }
    total += ret;
  }
  return total / n_rollouts;
}

// ------------------------------------------------------------------- eval

struct EvalReport {
  double mean_return = 0.0;
  double mean_episode_cost = 0.0;
  std::map<std::string, long long> violation_counts;
  int episodes = 0;
  std::uint64_t seed = 0;
};

inline EvalReport evaluate(const SmacNetworks& nets, const AblationFlags& flags, const Env& proto,
                           int episodes, std::uint64_t seed) {
  if (episodes < 1) throw UsageError("evaluate: episodes must be >= 1");
  EvalReport report;
  report.episodes = episodes;
  report.seed = seed;
  const auto names = proto.cost_component_names();
  for (const auto& n : names) report.violation_counts[n] = 0;

  SafePolicy policy(nets, proto.action_bound(), flags);
  MlpWorkspace ws;
  for (int ep = 0; ep < episodes; ++ep) {
    auto env = proto.clone();
    std::vector<double> obs = env->reset(Rng::derive(seed, ep));
    double ret = 0.0, cost = 0.0;
    bool done = false;
    while (!done) {
      const auto u = policy.act(obs, ws);
      CmdpStep s = env->step(u);
      ret += s.reward;
      cost += s.cost;
      for (std::size_t i = 0; i < names.size(); ++i)
        if (s.cost_components[i] > 0.0) ++report.violation_counts[names[i]];
      obs = s.next_obs;
      done = s.done;
    }
    report.mean_return += ret;
    report.mean_episode_cost += cost;
  }
  report.mean_return /= episodes;
  report.mean_episode_cost /= episodes;
  return report;
}

inline nlohmann::json eval_report_json(const EvalReport& r) {
  nlohmann::json j;
  j["mean_return"] = r.mean_return;
  j["mean_episode_cost"] = r.mean_episode_cost;
  j["episodes"] = r.episodes;
  j["seed"] = r.seed;
  j["violation_counts"] = r.violation_counts;
  return j;
}

// ------------------------------------------------------------- bias curve

struct BiasSample {
  long long step = 0;
  double estimated_q = 0.0;
  double true_q = 0.0;
  double bias = 0.0;
};

struct BiasProbeMeta {
  int probe_step = 0;
  int episodes = 0;
  int n_rollouts = 0;
  long long horizon = 0;
};

// Probe step: step 500 of an evaluation episode, or the midpoint when
// episodes are shorter than that.
inline int bias_probe_step(int episode_steps) {
  return episode_steps >= 500 ? 500 : episode_steps / 2;
}

// One bias sample from a set of loaded networks: capture (state, action) at
// the probe step of eval_episodes deterministic episodes, average the
// critic's min-mean estimate and the Monte-Carlo return.
inline BiasSample bias_sample(const SmacNetworks& nets, const AblationFlags& flags,
                              const Env& proto, double gamma, const ProbeConfig& probe,
                              std::uint64_t seed, long long step_count, BiasProbeMeta* meta) {
  SafePolicy policy(nets, proto.action_bound(), flags);
  MlpWorkspace ws;
  const int probe_step = bias_probe_step(proto.episode_steps());
  const long long horizon = mc_horizon(gamma, proto.reward_abs_bound(), probe.mc_tolerance);
  if (meta) {
    meta->probe_step = probe_step;
    meta->episodes = probe.eval_episodes;
    meta->n_rollouts = probe.n_rollouts;
    meta->horizon = horizon;
  }

  double est_acc = 0.0, true_acc = 0.0;
  for (int ep = 0; ep < probe.eval_episodes; ++ep) {
    auto env = proto.clone();
    std::vector<double> obs = env->reset(Rng::derive(seed, ep));
    for (int t = 0; t < probe_step; ++t) {
      const auto u = policy.act(obs, ws);
      obs = env->step(u).next_obs;
    }
    const auto action = policy.act(obs, ws);
    CriticOutput q1 = critic_eval(nets.q1, nets.critic_spec, obs, action, ws);
    CriticOutput q2 = critic_eval(nets.q2, nets.critic_spec, obs, action, ws);
    est_acc += std::min(q1.q_mean, q2.q_mean);
    true_acc += true_q_monte_carlo(*env, action, policy, gamma, probe.n_rollouts, horizon);
  }

  BiasSample s;
  s.step = step_count;
  s.estimated_q = est_acc / probe.eval_episodes;
  s.true_q = true_acc / probe.eval_episodes;
  s.bias = s.estimated_q - s.true_q;
  return s;
}

// Bias samples for every checkpoint in a run directory, ordered by step.
inline std::vector<BiasSample> bias_curve(const std::filesystem::path& checkpoint_dir,
                                          SmacNetworks& nets, const AblationFlags& flags,
                                          const Env& proto, double gamma,
                                          const ProbeConfig& probe, std::uint64_t seed,
                                          BiasProbeMeta* meta = nullptr) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(checkpoint_dir))
    for (const auto& e : std::filesystem::directory_iterator(checkpoint_dir))
      if (e.path().extension() == ".ckpt") files.push_back(e.path());
  if (files.empty()) throw FileError("no checkpoints in " + checkpoint_dir.string());
  std::sort(files.begin(), files.end());

  std::vector<BiasSample> out;
  for (const auto& f : files) {
    const ParamStore combined = load_checkpoint(f.string());
    split_networks(combined, nets, nullptr);
    out.push_back(bias_sample(nets, flags, proto, gamma, probe, seed, combined.step_count(),
                              meta));
  }
  return out;
}

inline void write_bias_csv(const std::filesystem::path& path,
                           const std::vector<BiasSample>& samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot open bias csv: " + path.string());
  out << "step,estimated_q,true_q,bias\n";
  char buf[160];
  for (const auto& s : samples) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g\n", s.step, s.estimated_q, s.true_q,
                  s.bias);
    out << buf;
  }
}

// ------------------------------------------------- bias ratio experiment

// Measures the expected post-update shift of the critic mean head under
// injected noisy targets, with the distributional scaling pinned at a given
// sigma. Targets are y = Q(x, u) + max(nu1, nu2) with nu zero-mean Gaussian,
// so the max injects the upward bias that the scaled update is supposed to
// damp; the update applies only the mean-head term
//   w <- w + lr * (y - Q) / (2 sigma^2) * grad Q.
// Reusing the same noise seed across sigma values gives a common-random-
// numbers estimate of the shift ratio.
inline double critic_mean_shift_experiment(const ParamStore& base, const CriticSpec& spec,
                                           std::span<const double> x, std::span<const double> u,
                                           double sigma_pinned, double lr, double noise_scale,
                                           int trials, std::uint64_t noise_seed) {
  if (!(sigma_pinned > 0.0)) throw ContractError("sigma must be positive");
  MlpWorkspace ws;

  // grad Q at the probe point, from the base parameters.
  std::vector<double> xu(x.size() + u.size());
  std::copy(x.begin(), x.end(), xu.begin());
  std::copy(u.begin(), u.end(), xu.begin() + x.size());
  ad::Tape tape;
  TapeParams reg;
  ad::Var xv = tape.leaf(1, static_cast<int>(xu.size()), xu);
  CriticVars out = critic_forward(tape, base, spec, xv, &reg);
  tape.backward(out.q_mean);
  const double q0 = tape.value_scalar(out.q_mean);

  GradientMap grad_q;
  collect_grads(tape, reg, grad_q);

  Rng rng(noise_seed);
  ParamStore work = base;
  std::vector<double> q(1), sig(1);
  double shift_acc = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    const double nu = noise_scale * std::max(rng.normal(), rng.normal());
    const double coeff = lr * nu / (2.0 * sigma_pinned * sigma_pinned);
    // w' = w + coeff * grad Q, rebuilt from the base parameters each trial.
    auto& entries = work.entries_mut();
    const auto& base_entries = base.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const auto& g = grad_q.at(entries[k].name);
      for (std::size_t i = 0; i < g.size(); ++i)
        entries[k].data[i] = base_entries[k].data[i] + coeff * g[i];
    }
    critic_eval_batch(work, spec, 1, xu, q, sig, ws);
    shift_acc += q[0] - q0;
  }
  return shift_acc / trials;
}

}  // namespace smac
