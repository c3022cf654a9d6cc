#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "smac/agent.hpp"
#include "smac/envs.hpp"
#include "smac/metrics.hpp"
#include "smac/replay.hpp"

namespace smac {

// Combined checkpoint store: every network under its own prefix, plus the
// safety weight and the global step.
inline ParamStore merge_networks(const SmacNetworks& nets, double lambda, long long step) {
  ParamStore out;
  auto put = [&](const char* prefix, const ParamStore& src) {
    for (const auto& e : src.entries())
      out.add(std::string(prefix) + "/" + e.name, e.shape, e.data);
  };
  put("risky", nets.risky);
  put("modulator", nets.modulator);
  put("q1", nets.q1);
  put("q2", nets.q2);
  put("c1", nets.c1);
  put("c2", nets.c2);
  put("t_risky", nets.t_risky);
  put("t_modulator", nets.t_modulator);
  put("t_q1", nets.t_q1);
  put("t_q2", nets.t_q2);
  put("t_c1", nets.t_c1);
  put("t_c2", nets.t_c2);
  out.add("lagrange/lambda", {1}, {lambda});
  out.set_step_count(step);
  return out;
}

// Inverse of merge_networks: nets must already have the matching layout.
inline void split_networks(const ParamStore& combined, SmacNetworks& nets, double* lambda) {
  auto take = [&](const char* prefix, ParamStore& dst) {
    for (auto& e : dst.entries_mut()) {
      auto src = combined.values(std::string(prefix) + "/" + e.name);
      if (src.size() != e.data.size())
        throw ContractError("checkpoint entry size mismatch for " + e.name);
      std::copy(src.begin(), src.end(), e.data.begin());
    }
  };
  take("risky", nets.risky);
  take("modulator", nets.modulator);
  take("q1", nets.q1);
  take("q2", nets.q2);
  take("c1", nets.c1);
  take("c2", nets.c2);
  take("t_risky", nets.t_risky);
  take("t_modulator", nets.t_modulator);
  take("t_q1", nets.t_q1);
  take("t_q2", nets.t_q2);
  take("t_c1", nets.t_c1);
  take("t_c2", nets.t_c2);
  if (lambda) *lambda = combined.values("lagrange/lambda")[0];
}

struct TrainResult {
  std::vector<double> episode_returns;
  std::vector<double> episode_costs;
  double final_lambda = 0.0;
  long long steps = 0;
  long long episodes = 0;
  InvariantMonitor monitor;
};

// Sequential, single-threaded training loop. RNG consumption order per step:
// action noise, env reset noise at episode boundaries, batch indices, then
// update reparameterization noise (see UpdateNoise).
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::unique_ptr<Env> env)
      : cfg_(cfg),
        env_(std::move(env)),
        rng_(cfg.seed),
        nets_(SmacNetworks::init(env_->obs_dim(), env_->action_dim(), cfg.hidden, cfg.seed,
                                 cfg.sigma_min, cfg.log_std_min, cfg.log_std_max)),
        buffer_(cfg.buffer_capacity, env_->obs_dim(), env_->action_dim()) {
    cfg_.validate();
    lagrange_.lambda = cfg_.lambda_init;
    lagrange_.budget = cfg_.constraint_budget;
    lagrange_.lr = cfg_.lr_lambda;
    lagrange_.update_every_k = cfg_.lambda_update_every_k;
    lagrange_.cost_discount = cfg_.cost_discount;
    divergence_bound_ = 10.0 * env_->reward_abs_bound() / (1.0 - cfg_.gamma);
  }

  void set_metrics_path(const std::string& path) { metrics_ = MetricsWriter(path); }
  void set_checkpoint_dir(const std::filesystem::path& dir, long long every) {
    checkpoint_dir_ = dir;
    checkpoint_every_ = every;
    std::filesystem::create_directories(dir);
  }
  void set_metrics_every(long long every) { metrics_every_ = every; }

  const SmacNetworks& nets() const { return nets_; }
  SmacNetworks& nets_mut() { return nets_; }
  const InvariantMonitor& monitor() const { return monitor_; }
  double lambda() const {
    return cfg_.ablations.lambda_fixed ? *cfg_.ablations.lambda_fixed : lagrange_.lambda;
  }
  const ReplayBuffer& buffer() const { return buffer_; }
  const MetricsWriter& metrics() const { return metrics_; }

  TrainResult run() {
    TrainResult result;
    std::vector<double> obs = env_->reset(rng_.next_u64());
    const double u_max = env_->action_bound();
    const long long learn_after = std::max<long long>(cfg_.start_learning_step, cfg_.batch_size);

    double ep_return = 0.0;
    std::vector<double> ep_costs;
    long long steps_since_lambda = 0;
    double last_ep_return = 0.0, last_ep_cost = 0.0;
    long long episodes = 0;

    // Running means of update stats since the last emitted row.
    UpdateStats window{};
    long long window_updates = 0;
    UpdateStats last_window{};

    Batch batch;
    for (long long m = 0; m < cfg_.total_steps; ++m) {
      const ActionTriple a =
          smac_act(nets_, obs, u_max, /*deterministic=*/false, &rng_, cfg_.ablations, ws_);
      const CmdpStep step = env_->step(a.u);

      // Both tasks end episodes only on the step limit; store transitions as
      // non-terminal so the bootstrap stays stationary across the cut.
      buffer_.push(obs, a.u, step.reward, step.cost, step.next_obs, /*done=*/false);
      ep_return += step.reward;
      ep_costs.push_back(step.cost);
      obs = step.next_obs;
      ++steps_since_lambda;

      const bool episode_done = step.done;
      if (episode_done) {
        ++episodes;
        last_ep_return = ep_return;
        last_ep_cost = 0.0;
        for (double c : ep_costs) last_ep_cost += c;
        result.episode_returns.push_back(ep_return);
        result.episode_costs.push_back(last_ep_cost);
        if (!cfg_.ablations.lambda_fixed && steps_since_lambda >= lagrange_.update_every_k) {
          lagrange_update(lagrange_, ep_costs);
          steps_since_lambda = 0;
          monitor_.check_lambda(lagrange_.lambda);
        }
      }

      if (m + 1 >= learn_after && buffer_.size() >= static_cast<std::size_t>(cfg_.batch_size)) {
        buffer_.sample(rng_, cfg_.batch_size, batch);
        const UpdateNoise noise =
            draw_update_noise(rng_, cfg_.batch_size, env_->action_dim(), cfg_.ablations);
        const UpdateStats stats =
            smac_update_step(nets_, tape_, batch, noise, cfg_, lambda(), u_max, ws_, &monitor_);
        if (stats.max_abs_q > divergence_bound_)
          throw DivergenceError("critic mean " + std::to_string(stats.max_abs_q) +
                                " exceeded divergence bound " +
                                std::to_string(divergence_bound_) + " at step " +
                                std::to_string(m + 1));
        window.critic_loss += stats.critic_loss;
        window.cost_critic_loss += stats.cost_critic_loss;
        window.policy_obj += stats.policy_obj;
        window.modulator_obj += stats.modulator_obj;
        window.q1_mean += stats.q1_mean;
        window.q2_mean += stats.q2_mean;
        window.sigma1_mean += stats.sigma1_mean;
        window.sigma2_mean += stats.sigma2_mean;
        ++window_updates;
      }

      const bool boundary = ((m + 1) % metrics_every_) == 0;
      if (episode_done || boundary) {
        if (window_updates > 0) {
          const double inv = 1.0 / static_cast<double>(window_updates);
          last_window.critic_loss = window.critic_loss * inv;
          last_window.cost_critic_loss = window.cost_critic_loss * inv;
          last_window.policy_obj = window.policy_obj * inv;
          last_window.modulator_obj = window.modulator_obj * inv;
          last_window.q1_mean = window.q1_mean * inv;
          last_window.q2_mean = window.q2_mean * inv;
          last_window.sigma1_mean = window.sigma1_mean * inv;
          last_window.sigma2_mean = window.sigma2_mean * inv;
          window = UpdateStats{};
          window_updates = 0;
        }
        MetricRow row;
        row.step = m + 1;
        row.episode = episodes;
        row.ret = last_ep_return;
        row.episode_cost = last_ep_cost;
        row.lambda = lambda();
        row.q1_mean = last_window.q1_mean;
        row.q2_mean = last_window.q2_mean;
        row.sigma1_mean = last_window.sigma1_mean;
        row.sigma2_mean = last_window.sigma2_mean;
        row.critic_loss = last_window.critic_loss;
        row.cost_critic_loss = last_window.cost_critic_loss;
        row.policy_obj = last_window.policy_obj;
        row.modulator_obj = last_window.modulator_obj;
        metrics_.write(row);
      }

      if (checkpoint_every_ > 0 && ((m + 1) % checkpoint_every_ == 0 || m + 1 == cfg_.total_steps))
        write_checkpoint(m + 1);

      if (episode_done) {
        obs = env_->reset(rng_.next_u64());
        ep_return = 0.0;
        ep_costs.clear();
      }
    }

    metrics_.flush();
    result.final_lambda = lambda();
    result.steps = cfg_.total_steps;
    result.episodes = episodes;
    result.monitor = monitor_;
    return result;
  }

  void write_checkpoint(long long step) {
    if (checkpoint_dir_.empty()) return;
    char name[64];
    std::snprintf(name, sizeof(name), "step_%08lld.ckpt", step);
    const ParamStore combined = merge_networks(nets_, lambda(), step);
    save_checkpoint(combined, (checkpoint_dir_ / name).string());
  }

 private:
  TrainConfig cfg_;
  std::unique_ptr<Env> env_;
  Rng rng_;
  SmacNetworks nets_;
  ReplayBuffer buffer_;
  LagrangeState lagrange_;
  InvariantMonitor monitor_;
  MetricsWriter metrics_;
  ad::Tape tape_;
  MlpWorkspace ws_;
  std::filesystem::path checkpoint_dir_;
  long long checkpoint_every_ = 0;
  long long metrics_every_ = 1000;
  double divergence_bound_ = 0.0;
};

}  // namespace smac
