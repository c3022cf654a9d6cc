#pragma once

#include <cmath>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smac/autodiff.hpp"
#include "smac/error.hpp"
#include "smac/nets.hpp"
#include "smac/param_store.hpp"
#include "smac/replay.hpp"
#include "smac/rng.hpp"

namespace smac {

struct AblationFlags {
  bool disable_modulator = false;
  bool disable_distributional = false;
  // When set, the safety weight is pinned to this value and never updated.
  // 0 with disable_modulator reduces training to the reward-only baseline;
  // disable_modulator with an adaptive weight reroutes the cost penalty into
  // the risky policy objective (the Lagrangian baseline).
  std::optional<double> lambda_fixed;
};

struct TrainConfig {
  double gamma = 0.99;
  double tau = 5e-3;
  int batch_size = 512;
  long long total_steps = 5'000'000;
  long long start_learning_step = 100;
  double lr_policy = 1e-4;
  double lr_modulator = 1e-4;
  double lr_critic = 1e-4;
  double lr_cost_critic = 1e-4;
  double lr_lambda = 1e-4;
  double sigma_min = 1.0;
  double zeta = 3.0;
  std::vector<int> hidden = {256, 256};
  double log_std_min = -5.0;
  double log_std_max = 2.0;
  double entropy_coef = 0.0;
  double constraint_budget = 50.0;
  double lambda_init = 0.0;
  long long lambda_update_every_k = 1000;
  double cost_discount = 1.0;
  std::size_t buffer_capacity = 1'000'000;
  std::uint64_t seed = 0;
  AblationFlags ablations;

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ContractError("gamma must be in (0, 1)");
    if (!(tau > 0.0 && tau <= 1.0)) throw ContractError("tau must be in (0, 1]");
    if (!(zeta > 0.0)) throw ContractError("zeta must be positive");
    if (!(sigma_min >= 1.0)) throw ContractError("sigma_min must be >= 1");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (total_steps < 1) throw ContractError("total_steps must be >= 1");
    if (!(cost_discount > 0.0 && cost_discount <= 1.0))
      throw ContractError("cost_discount must be in (0, 1]");
    if (lambda_init < 0.0) throw ContractError("lambda_init must be >= 0");
    if (lambda_update_every_k < 1) throw ContractError("lambda_update_every_k must be >= 1");
    for (double lr : {lr_policy, lr_modulator, lr_critic, lr_cost_critic, lr_lambda})
      if (!(lr > 0.0)) throw ContractError("learning rates must be positive");
  }
};

// ------------------------------------------------------------------ lagrange

struct LagrangeState {
  double lambda = 0.0;
  double budget = 50.0;       // constraint level C
  double lr = 1e-4;
  long long update_every_k = 1000;
  double cost_discount = 1.0;
};

// One dual ascent step from a finished episode's cost sequence:
// lambda <- max(0, lambda - lr * (C - sum_t gamma_c^t cost_t)).
inline double lagrange_update(LagrangeState& st, std::span<const double> episode_costs) {
  double total = 0.0, disc = 1.0;
  for (double c : episode_costs) {
    total += disc * c;
    disc *= st.cost_discount;
  }
  st.lambda = std::max(0.0, st.lambda - st.lr * (st.budget - total));
  return st.lambda;
}

// ------------------------------------------------------------ small ops

// clip(u_bar + delta_u) keeps the composed action inside the box.
inline std::vector<double> modulate(std::span<const double> u_bar,
                                    std::span<const double> delta_u, double u_max) {
  if (u_bar.size() != delta_u.size()) throw DimensionError("modulate: length mismatch");
  std::vector<double> u(u_bar.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    u[i] = std::clamp(u_bar[i] + delta_u[i], -u_max, u_max);
  return u;
}

// d(u, u_bar) = 0.5 * ||u - u_bar||^2
inline double distance(std::span<const double> u, std::span<const double> u_bar) {
  if (u.size() != u_bar.size()) throw DimensionError("distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] - u_bar[i];
    s += d * d;
  }
  return 0.5 * s;
}

// KL(N(target_mean, target_sigma^2) || N(mean, sigma^2)), closed form.
inline double kl_gaussian(double target_mean, double target_sigma, double mean, double sigma) {
  if (!(target_sigma > 0.0) || !(sigma > 0.0))
    throw ContractError("kl_gaussian: sigmas must be positive");
  const double diff = target_mean - mean;
  return std::log(sigma / target_sigma) +
         (target_sigma * target_sigma + diff * diff) / (2.0 * sigma * sigma) - 0.5;
}

// ---------------------------------------------------------------- networks

// Online and target parameter stores for the full agent: risky policy,
// safety modulator, double distributional critics, double cost critics.
struct SmacNetworks {
  int obs_dim = 0;
  int act_dim = 0;
  PolicySpec policy_spec;
  PolicySpec modulator_spec;  // conditioned on (obs, u_bar)
  CriticSpec critic_spec;
  MlpSpec cost_critic_spec;

  ParamStore risky, modulator, q1, q2, c1, c2;
  ParamStore t_risky, t_modulator, t_q1, t_q2, t_c1, t_c2;

  static SmacNetworks init(int obs_dim, int act_dim, const std::vector<int>& hidden,
                           std::uint64_t seed, double sigma_min = 1.0, double log_std_min = -5.0,
                           double log_std_max = 2.0) {
    SmacNetworks n;
    n.obs_dim = obs_dim;
    n.act_dim = act_dim;
    n.policy_spec = make_policy_spec(obs_dim, act_dim, hidden, log_std_min, log_std_max);
    n.modulator_spec =
        make_policy_spec(obs_dim + act_dim, act_dim, hidden, log_std_min, log_std_max);
    n.critic_spec = make_critic_spec(obs_dim, act_dim, hidden, sigma_min);
    n.cost_critic_spec = MlpSpec{obs_dim + act_dim, hidden, 1};

    n.risky = init_mlp(n.policy_spec.mlp, Rng::derive(seed, 1));
    n.modulator = init_mlp(n.modulator_spec.mlp, Rng::derive(seed, 2));
    n.q1 = init_mlp(n.critic_spec.mlp, Rng::derive(seed, 3));
    n.q2 = init_mlp(n.critic_spec.mlp, Rng::derive(seed, 4));
    n.c1 = init_mlp(n.cost_critic_spec, Rng::derive(seed, 5));
    n.c2 = init_mlp(n.cost_critic_spec, Rng::derive(seed, 6));
    n.t_risky = n.risky;
    n.t_modulator = n.modulator;
    n.t_q1 = n.q1;
    n.t_q2 = n.q2;
    n.t_c1 = n.c1;
    n.t_c2 = n.c2;
    return n;
  }
};

// --------------------------------------------------------------------- act

struct ActionTriple {
  std::vector<double> u_bar;
  std::vector<double> delta_u;
  std::vector<double> u;
};

// Risky action, modulation and composed action for one observation. In
// explore mode both heads are sampled (risky noise first, then modulator);
// deterministic mode takes the means. With the modulator disabled, delta_u
// is pinned to zero and the risky action is clipped directly.
inline ActionTriple smac_act(const SmacNetworks& nets, std::span<const double> obs, double u_max,
                             bool deterministic, Rng* rng, const AblationFlags& flags,
                             MlpWorkspace& ws) {
  ActionTriple out;
  GaussianHead risky = policy_eval(nets.risky, nets.policy_spec, obs, ws);
  if (deterministic) {
    out.u_bar = risky.mean;
  } else {
    std::vector<double> noise(static_cast<std::size_t>(nets.act_dim));
    rng->normal_fill(noise);
    out.u_bar = sample_reparameterized(risky, noise);
  }

  if (flags.disable_modulator) {
    out.delta_u.assign(static_cast<std::size_t>(nets.act_dim), 0.0);
  } else {
    std::vector<double> xin(obs.begin(), obs.end());
    xin.insert(xin.end(), out.u_bar.begin(), out.u_bar.end());
    GaussianHead mod = policy_eval(nets.modulator, nets.modulator_spec, xin, ws);
    if (deterministic) {
      out.delta_u = mod.mean;
    } else {
      std::vector<double> noise(static_cast<std::size_t>(nets.act_dim));
      rng->normal_fill(noise);
      out.delta_u = sample_reparameterized(mod, noise);
    }
  }
  out.u = modulate(out.u_bar, out.delta_u, u_max);
  return out;
}

// ------------------------------------------------------------ update noise

// All reparameterization noise consumed by one batch update, drawn in a
// fixed documented order so runs are reproducible and updates can be
// replayed against reference implementations:
//   critic targets (risky, modulator, z1, z2) -> cost targets (risky,
//   modulator) -> policy update (risky, modulator) -> modulator update
//   (risky, modulator). Draws for disabled components are skipped.
struct UpdateNoise {
  std::vector<double> tgt_risky, tgt_mod;  // B x act
  std::vector<double> z1, z2;              // B
  std::vector<double> cost_risky, cost_mod;
  std::vector<double> pol_risky, pol_mod;
  std::vector<double> mod_risky, mod_mod;
};

inline UpdateNoise draw_update_noise(Rng& rng, int batch, int act_dim,
                                     const AblationFlags& flags) {
  const std::size_t ba = static_cast<std::size_t>(batch) * act_dim;
  const bool mod = !flags.disable_modulator;
  UpdateNoise n;
  auto fill = [&](std::vector<double>& v, std::size_t len) {
    v.resize(len);
    rng.normal_fill(v);
  };
  fill(n.tgt_risky, ba);
  if (mod) fill(n.tgt_mod, ba);
  if (!flags.disable_distributional) {
    fill(n.z1, static_cast<std::size_t>(batch));
    fill(n.z2, static_cast<std::size_t>(batch));
  }
  fill(n.cost_risky, ba);
  if (mod) fill(n.cost_mod, ba);
  fill(n.pol_risky, ba);
  if (mod) fill(n.pol_mod, ba);
  if (mod) {
    fill(n.mod_risky, ba);
    fill(n.mod_mod, ba);
  }
  return n;
}

// ----------------------------------------------------------------- targets

namespace detail {

// Sample the safe target policy at every next state: u' = m(u_bar', du'),
// with u_bar' from the target risky head and du' from the target modulator.
inline void target_policy_actions(const SmacNetworks& nets, const Batch& batch,
                                  std::span<const double> noise_risky,
                                  std::span<const double> noise_mod, double u_max,
                                  const AblationFlags& flags, MlpWorkspace& ws,
                                  std::vector<double>& xu_next) {
  const int B = batch.size, od = batch.obs_dim, ad = batch.act_dim;
  xu_next.resize(static_cast<std::size_t>(B) * (od + ad));
  std::vector<double> obs(od), xin(od + ad);
  for (int b = 0; b < B; ++b) {
    std::copy_n(batch.next_obs.begin() + static_cast<std::size_t>(b) * od, od, obs.begin());
    GaussianHead risky = policy_eval(nets.t_risky, nets.policy_spec, obs, ws);
    std::vector<double> u_bar = sample_reparameterized(
        risky, noise_risky.subspan(static_cast<std::size_t>(b) * ad, ad));
    std::vector<double> du(static_cast<std::size_t>(ad), 0.0);
    if (!flags.disable_modulator) {
      std::copy(obs.begin(), obs.end(), xin.begin());
      std::copy(u_bar.begin(), u_bar.end(), xin.begin() + od);
      GaussianHead mod = policy_eval(nets.t_modulator, nets.modulator_spec, xin, ws);
      du = sample_reparameterized(mod, noise_mod.subspan(static_cast<std::size_t>(b) * ad, ad));
    }
    const std::vector<double> u = modulate(u_bar, du, u_max);
    double* row = xu_next.data() + static_cast<std::size_t>(b) * (od + ad);
    std::copy(obs.begin(), obs.end(), row);
    std::copy(u.begin(), u.end(), row + od);
  }
}

inline void concat_obs_act(const Batch& batch, std::vector<double>& xu) {
  const int B = batch.size, od = batch.obs_dim, ad = batch.act_dim;
  xu.resize(static_cast<std::size_t>(B) * (od + ad));
  for (int b = 0; b < B; ++b) {
    double* row = xu.data() + static_cast<std::size_t>(b) * (od + ad);
    std::copy_n(batch.obs.begin() + static_cast<std::size_t>(b) * od, od, row);
    std::copy_n(batch.act.begin() + static_cast<std::size_t>(b) * ad, ad, row + od);
  }
}

}  // namespace detail

// Per-sample targets for the distributional critic update. y_hat is the
// mean-based bootstrap r + gamma * min_i Q_target_i(x', u'); delta_i is the
// sampled residual clip(y_tilde - Q_i(x, u), +-zeta * sigma_hat_i) with
// y_tilde = r + gamma * min_i z_i, z_i ~ N(Q_target_i, sigma_target_i^2),
// and sigma_hat_i the batch mean of the online critic's sigma. A done flag
// zeroes the bootstrap term.
struct CriticBatchTargets {
  std::vector<double> y_hat;    // B
  std::vector<double> y_tilde;  // B (empty when distributional is off)
  std::vector<double> delta1, delta2;
  double sigma_hat1 = 1.0, sigma_hat2 = 1.0;
  std::vector<double> q1, q2;        // online critic means at (x, u)
  std::vector<double> sig1, sig2;    // online critic sigmas at (x, u)
  std::vector<double> xu;            // batch (x, u) rows, reused by the update
};

inline CriticBatchTargets distributional_targets(const SmacNetworks& nets, const Batch& batch,
                                                 const TrainConfig& cfg, double u_max,
                                                 const UpdateNoise& noise, MlpWorkspace& ws) {
  const int B = batch.size;
  CriticBatchTargets t;

  std::vector<double> xu_next;
  detail::target_policy_actions(nets, batch, noise.tgt_risky, noise.tgt_mod, u_max,
                                cfg.ablations, ws, xu_next);

  std::vector<double> tq1(B), tq2(B), ts1(B), ts2(B);
  critic_eval_batch(nets.t_q1, nets.critic_spec, B, xu_next, tq1, ts1, ws);
  critic_eval_batch(nets.t_q2, nets.critic_spec, B, xu_next, tq2, ts2, ws);

  detail::concat_obs_act(batch, t.xu);
  t.q1.resize(B);
  t.q2.resize(B);
  t.sig1.resize(B);
  t.sig2.resize(B);
  critic_eval_batch(nets.q1, nets.critic_spec, B, t.xu, t.q1, t.sig1, ws);
  critic_eval_batch(nets.q2, nets.critic_spec, B, t.xu, t.q2, t.sig2, ws);

  t.y_hat.resize(B);
  for (int b = 0; b < B; ++b) {
    const double boot = 1.0 - batch.done[b];
    t.y_hat[b] = batch.reward[b] + cfg.gamma * boot * std::min(tq1[b], tq2[b]);
  }

  if (cfg.ablations.disable_distributional) return t;

  double s1 = 0.0, s2 = 0.0;
  for (int b = 0; b < B; ++b) {
    s1 += t.sig1[b];
    s2 += t.sig2[b];
  }
  t.sigma_hat1 = s1 / B;
  t.sigma_hat2 = s2 / B;

  t.y_tilde.resize(B);
  t.delta1.resize(B);
  t.delta2.resize(B);
  for (int b = 0; b < B; ++b) {
    const double boot = 1.0 - batch.done[b];
    const double zs1 = tq1[b] + ts1[b] * noise.z1[b];
    const double zs2 = tq2[b] + ts2[b] * noise.z2[b];
    t.y_tilde[b] = batch.reward[b] + cfg.gamma * boot * std::min(zs1, zs2);
    const double bound1 = cfg.zeta * t.sigma_hat1;
    const double bound2 = cfg.zeta * t.sigma_hat2;
    t.delta1[b] = std::clamp(t.y_tilde[b] - t.q1[b], -bound1, bound1);
    t.delta2[b] = std::clamp(t.y_tilde[b] - t.q2[b], -bound2, bound2);
  }
  return t;
}

// Cost critic bootstrap: r_c + gamma * max_i Qc_target_i(x', u') with u'
// sampled from the safe target policy (pessimistic across the double cost
// critics).
inline std::vector<double> cost_targets(const SmacNetworks& nets, const Batch& batch,
                                        const TrainConfig& cfg, double u_max,
                                        const UpdateNoise& noise, MlpWorkspace& ws) {
  const int B = batch.size;
  std::vector<double> xu_next;
  detail::target_policy_actions(nets, batch, noise.cost_risky, noise.cost_mod, u_max,
                                cfg.ablations, ws, xu_next);
  std::vector<double> qc1(B), qc2(B);
  mlp_eval(nets.t_c1, nets.cost_critic_spec, B, xu_next, qc1, ws);
  mlp_eval(nets.t_c2, nets.cost_critic_spec, B, xu_next, qc2, ws);
  std::vector<double> y(B);
  for (int b = 0; b < B; ++b) {
    const double boot = 1.0 - batch.done[b];
    y[b] = batch.cost[b] + cfg.gamma * boot * std::max(qc1[b], qc2[b]);
  }
  return y;
}

// ----------------------------------------------------------------- monitor

// Always-on training invariants; every violation is counted rather than
// thrown so a full run can be audited afterwards.
struct InvariantMonitor {
  long long lambda_negative = 0;
  long long sigma_below_min = 0;
  long long delta_out_of_bound = 0;
  long long risky_touched_by_modulator_update = 0;
  long long modulator_touched_by_risky_update = 0;

  long long total() const {
    return lambda_negative + sigma_below_min + delta_out_of_bound +
           risky_touched_by_modulator_update + modulator_touched_by_risky_update;
  }

  void check_lambda(double lambda) {
    if (lambda < 0.0) ++lambda_negative;
  }
  void check_sigmas(std::span<const double> sigmas, double sigma_min) {
    for (double s : sigmas)
      if (s < sigma_min) ++sigma_below_min;
  }
  void check_deltas(std::span<const double> deltas, double bound) {
    for (double d : deltas)
      if (std::abs(d) > bound * (1.0 + 1e-12)) ++delta_out_of_bound;
  }
};

// ------------------------------------------------------------------ updates

struct UpdateStats {
  double critic_loss = 0.0;
  double cost_critic_loss = 0.0;
  double policy_obj = 0.0;
  double modulator_obj = 0.0;
  double q1_mean = 0.0, q2_mean = 0.0;
  double sigma1_mean = 0.0, sigma2_mean = 0.0;
  double max_abs_q = 0.0;
};

namespace detail {

// Surrogate whose exact gradient is the stabilized critic update rule:
//   (y_hat - Q) / (2 sigma0^2) on the mean head (sigma0 detached) and
//   (sigma^2 - delta^2) / sigma^3 on the sigma head (delta frozen):
//   L = (Q - y_hat)^2 / (4 sigma0^2) + log sigma + delta^2 / (2 sigma^2).
inline ad::Var critic_surrogate(ad::Tape& tape, const ParamStore& store, const CriticSpec& spec,
                                ad::Var xu, std::span<const double> y_hat,
                                std::span<const double> delta, bool distributional,
                                TapeParams& reg, CriticVars& out) {
  const int B = tape.rows(xu);
  out = critic_forward(tape, store, spec, xu, &reg);
  ad::Var y = tape.leaf(B, 1, y_hat);
  ad::Var diff = tape.sub(out.q_mean, y);
  if (!distributional) {
    // 0.5 * MSE on the mean head; sigma stays untrained.
    return tape.scale(tape.sum(tape.square(diff)), 0.5 / B);
  }
  ad::Var sig0 = tape.detach(out.sigma);
  ad::Var mean_term = tape.div(tape.square(diff), tape.scale(tape.square(sig0), 4.0));
  ad::Var d = tape.leaf(B, 1, delta);
  ad::Var sig_term =
      tape.add(tape.log(out.sigma), tape.div(tape.square(d), tape.scale(tape.square(out.sigma), 2.0)));
  return tape.scale(tape.sum(tape.add(mean_term, sig_term)), 1.0 / B);
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

// Descends the stabilized KL gradient for both critics independently.
inline void critic_update(SmacNetworks& nets, ad::Tape& tape, const CriticBatchTargets& t,
                          const TrainConfig& cfg, UpdateStats* stats,
                          InvariantMonitor* monitor) {
  const int B = static_cast<int>(t.y_hat.size());
  const bool dist = !cfg.ablations.disable_distributional;

  tape.reset();
  ad::Var xu = tape.leaf(B, nets.obs_dim + nets.act_dim, t.xu);
  TapeParams reg1, reg2;
  CriticVars v1, v2;
  ad::Var l1 = detail::critic_surrogate(tape, nets.q1, nets.critic_spec, xu, t.y_hat, t.delta1,
                                        dist, reg1, v1);
  ad::Var l2 = detail::critic_surrogate(tape, nets.q2, nets.critic_spec, xu, t.y_hat, t.delta2,
                                        dist, reg2, v2);
  ad::Var loss = tape.add(l1, l2);
  tape.backward(loss);

  static thread_local GradientMap g1, g2;
  collect_grads(tape, reg1, g1);
  collect_grads(tape, reg2, g2);
  sgd_step(nets.q1, g1, cfg.lr_critic);
  sgd_step(nets.q2, g2, cfg.lr_critic);

  if (stats) {
    stats->critic_loss = 0.5 * (tape.value_scalar(l1) + tape.value_scalar(l2));
    stats->q1_mean = detail::mean_of(t.q1);
    stats->q2_mean = detail::mean_of(t.q2);
    stats->sigma1_mean = dist ? detail::mean_of(t.sig1) : 1.0;
    stats->sigma2_mean = dist ? detail::mean_of(t.sig2) : 1.0;
    for (double q : t.q1) stats->max_abs_q = std::max(stats->max_abs_q, std::abs(q));
    for (double q : t.q2) stats->max_abs_q = std::max(stats->max_abs_q, std::abs(q));
  }
  if (monitor) {
    monitor->check_sigmas(tape.value(v1.sigma), cfg.sigma_min);
    monitor->check_sigmas(tape.value(v2.sigma), cfg.sigma_min);
    if (dist) {
      monitor->check_deltas(t.delta1, cfg.zeta * t.sigma_hat1);
      monitor->check_deltas(t.delta2, cfg.zeta * t.sigma_hat2);
    }
  }
}

// Plain 0.5 MSE descent for both cost critics against the pessimistic
// bootstrap target.
inline void cost_critic_update(SmacNetworks& nets, ad::Tape& tape, const Batch& batch,
                               std::span<const double> y_cost, const TrainConfig& cfg,
                               UpdateStats* stats) {
  const int B = batch.size;
  static thread_local std::vector<double> xu;
  detail::concat_obs_act(batch, xu);

  tape.reset();
  ad::Var x = tape.leaf(B, nets.obs_dim + nets.act_dim, xu);
  ad::Var y = tape.leaf(B, 1, y_cost);
  TapeParams reg1, reg2;
  ad::Var qc1 = mlp_forward(tape, nets.c1, nets.cost_critic_spec, x, &reg1);
  ad::Var qc2 = mlp_forward(tape, nets.c2, nets.cost_critic_spec, x, &reg2);
  ad::Var l1 = tape.scale(tape.sum(tape.square(tape.sub(qc1, y))), 0.5 / B);
  ad::Var l2 = tape.scale(tape.sum(tape.square(tape.sub(qc2, y))), 0.5 / B);
  ad::Var loss = tape.add(l1, l2);
  tape.backward(loss);

  static thread_local GradientMap g1, g2;
  collect_grads(tape, reg1, g1);
  collect_grads(tape, reg2, g2);
  sgd_step(nets.c1, g1, cfg.lr_cost_critic);
  sgd_step(nets.c2, g2, cfg.lr_cost_critic);
  if (stats) stats->cost_critic_loss = 0.5 * (tape.value_scalar(l1) + tape.value_scalar(l2));
}

// Ascends E[min_i Q_i(x, m(u_bar, sg(du)))] through the reparameterized
// risky action; the modulation is evaluated off-tape so no gradient can
// reach the modulator. With the modulator disabled and an active safety
// weight, the lambda-weighted pessimistic cost value is subtracted here
// instead (Lagrangian baseline).
inline void risky_policy_update(SmacNetworks& nets, ad::Tape& tape, const Batch& batch,
                                const UpdateNoise& noise, const TrainConfig& cfg, double lambda,
                                double u_max, MlpWorkspace& ws, UpdateStats* stats) {
  const int B = batch.size;
  const int od = nets.obs_dim, ad_ = nets.act_dim;

  tape.reset();
  ad::Var x = tape.leaf(B, od, batch.obs);
  TapeParams reg;
  PolicyHeadVars head = policy_forward(tape, nets.risky, nets.policy_spec, x, &reg);
  ad::Var eps = tape.leaf(B, ad_, noise.pol_risky);
  ad::Var u_bar = tape.add(head.mean, tape.mul(eps, tape.exp(head.log_std)));

  // Modulation, sampled with current parameters but detached from this loss.
  static thread_local std::vector<double> du0;
  du0.assign(static_cast<std::size_t>(B) * ad_, 0.0);
  if (!cfg.ablations.disable_modulator) {
    auto ub = tape.value(u_bar);
    std::vector<double> xin(static_cast<std::size_t>(od + ad_));
    for (int b = 0; b < B; ++b) {
      std::copy_n(batch.obs.begin() + static_cast<std::size_t>(b) * od, od, xin.begin());
      std::copy_n(ub.begin() + static_cast<std::size_t>(b) * ad_, ad_, xin.begin() + od);
      GaussianHead mod = policy_eval(nets.modulator, nets.modulator_spec, xin, ws);
      const auto du = sample_reparameterized(
          mod, std::span<const double>(noise.pol_mod).subspan(static_cast<std::size_t>(b) * ad_, ad_));
      std::copy(du.begin(), du.end(), du0.begin() + static_cast<std::size_t>(b) * ad_);
    }
  }
  ad::Var du = tape.leaf(B, ad_, du0);
  ad::Var u = tape.clip(tape.add(u_bar, du), -u_max, u_max);
  ad::Var xu = tape.concat_cols(x, u);

  CriticVars q1 = critic_forward(tape, nets.q1, nets.critic_spec, xu);
  CriticVars q2 = critic_forward(tape, nets.q2, nets.critic_spec, xu);
  ad::Var qmin = tape.cmin(q1.q_mean, q2.q_mean);
  ad::Var objective = tape.mean(qmin);
  ad::Var loss = tape.scale(objective, -1.0);

  if (cfg.ablations.disable_modulator && lambda != 0.0) {
    ad::Var c1 = mlp_forward(tape, nets.c1, nets.cost_critic_spec, xu);
    ad::Var c2 = mlp_forward(tape, nets.c2, nets.cost_critic_spec, xu);
    loss = tape.add(loss, tape.scale(tape.mean(tape.cmax(c1, c2)), lambda));
  }
  if (cfg.entropy_coef != 0.0) {
    // Gaussian entropy up to constants: sum of log stds.
    loss = tape.add(loss, tape.scale(tape.sum(head.log_std), -cfg.entropy_coef / B));
  }
  tape.backward(loss);

  static thread_local GradientMap g;
  collect_grads(tape, reg, g);
  sgd_step(nets.risky, g, cfg.lr_policy);
  if (stats) stats->policy_obj = tape.value_scalar(objective);
}

// Ascends E[-d(u, u_bar) - lambda * max_i Qc_i(x, u)] through the
// reparameterized modulation; the risky action is sampled off-tape and
// enters only as a constant.
inline void modulator_update(SmacNetworks& nets, ad::Tape& tape, const Batch& batch,
                             const UpdateNoise& noise, const TrainConfig& cfg, double lambda,
                             double u_max, MlpWorkspace& ws, UpdateStats* stats) {
  if (cfg.ablations.disable_modulator) return;
  const int B = batch.size;
  const int od = nets.obs_dim, ad_ = nets.act_dim;

  // Sample the risky head off-tape.
  static thread_local std::vector<double> u_bar0, x_ubar;
  u_bar0.resize(static_cast<std::size_t>(B) * ad_);
  x_ubar.resize(static_cast<std::size_t>(B) * (od + ad_));
  std::vector<double> obs(od);
  for (int b = 0; b < B; ++b) {
    std::copy_n(batch.obs.begin() + static_cast<std::size_t>(b) * od, od, obs.begin());
    GaussianHead risky = policy_eval(nets.risky, nets.policy_spec, obs, ws);
    const auto ub = sample_reparameterized(
        risky, std::span<const double>(noise.mod_risky).subspan(static_cast<std::size_t>(b) * ad_, ad_));
    std::copy(ub.begin(), ub.end(), u_bar0.begin() + static_cast<std::size_t>(b) * ad_);
    double* row = x_ubar.data() + static_cast<std::size_t>(b) * (od + ad_);
    std::copy(obs.begin(), obs.end(), row);
    std::copy(ub.begin(), ub.end(), row + od);
  }

  tape.reset();
  ad::Var x = tape.leaf(B, od, batch.obs);
  ad::Var xin = tape.leaf(B, od + ad_, x_ubar);
  ad::Var ub = tape.leaf(B, ad_, u_bar0);
  TapeParams reg;
  PolicyHeadVars head = policy_forward(tape, nets.modulator, nets.modulator_spec, xin, &reg);
  ad::Var eps = tape.leaf(B, ad_, noise.mod_mod);
  ad::Var du = tape.add(head.mean, tape.mul(eps, tape.exp(head.log_std)));
  ad::Var u = tape.clip(tape.add(ub, du), -u_max, u_max);

  ad::Var dist = tape.scale(tape.sum(tape.square(tape.sub(u, ub))), 0.5 / B);
  ad::Var xu = tape.concat_cols(x, u);
  ad::Var c1 = mlp_forward(tape, nets.c1, nets.cost_critic_spec, xu);
  ad::Var c2 = mlp_forward(tape, nets.c2, nets.cost_critic_spec, xu);
  ad::Var qcmax = tape.mean(tape.cmax(c1, c2));
  ad::Var loss = tape.add(dist, tape.scale(qcmax, lambda));
  tape.backward(loss);

  static thread_local GradientMap g;
  collect_grads(tape, reg, g);
  sgd_step(nets.modulator, g, cfg.lr_modulator);
  if (stats) stats->modulator_obj = -tape.value_scalar(loss);
}

inline void soft_update_all(SmacNetworks& nets, double tau) {
  soft_update(nets.t_risky, nets.risky, tau);
  soft_update(nets.t_modulator, nets.modulator, tau);
  soft_update(nets.t_q1, nets.q1, tau);
  soft_update(nets.t_q2, nets.q2, tau);
  soft_update(nets.t_c1, nets.c1, tau);
  soft_update(nets.t_c2, nets.c2, tau);
}

// One full batch update in algorithm order: distributional critics, cost
// critics, risky policy, safety modulator, then all target blends. The
// monitor bit-compares each policy store across the other policy's update.
inline UpdateStats smac_update_step(SmacNetworks& nets, ad::Tape& tape, const Batch& batch,
                                    const UpdateNoise& noise, const TrainConfig& cfg,
                                    double lambda, double u_max, MlpWorkspace& ws,
                                    InvariantMonitor* monitor) {
  UpdateStats stats;

  CriticBatchTargets targets = distributional_targets(nets, batch, cfg, u_max, noise, ws);
  critic_update(nets, tape, targets, cfg, &stats, monitor);

  const std::vector<double> y_cost = cost_targets(nets, batch, cfg, u_max, noise, ws);
  cost_critic_update(nets, tape, batch, y_cost, cfg, &stats);

  const ParamStore mod_before = nets.modulator;
  risky_policy_update(nets, tape, batch, noise, cfg, lambda, u_max, ws, &stats);
  if (monitor && !nets.modulator.values_equal(mod_before))
    ++monitor->modulator_touched_by_risky_update;

  const ParamStore risky_before = nets.risky;
  modulator_update(nets, tape, batch, noise, cfg, lambda, u_max, ws, &stats);
  if (monitor && !nets.risky.values_equal(risky_before))
    ++monitor->risky_touched_by_modulator_update;

  soft_update_all(nets, cfg.tau);
  return stats;
}

}  // namespace smac
