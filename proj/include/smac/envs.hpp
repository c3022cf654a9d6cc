#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "smac/error.hpp"
#include "smac/rng.hpp"

namespace smac {

// One constrained-MDP transition. `cost` is the sum of the indicator
// components; `done` marks the episode step limit (neither environment has
// terminal states of its own).
struct CmdpStep {
  std::vector<double> next_obs;
  double reward = 0.0;
  double cost = 0.0;
  bool done = false;
  std::vector<double> cost_components;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual std::vector<double> reset(std::uint64_t seed) = 0;
  virtual CmdpStep step(std::span<const double> action) = 0;
  virtual std::vector<double> observation() const = 0;
  virtual int obs_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual double action_bound() const = 0;
  virtual int episode_steps() const = 0;
  // Loose bound on |reward| per step, used by the divergence guard and the
  // Monte-Carlo horizon choice.
  virtual double reward_abs_bound() const = 0;
  virtual std::vector<std::string> cost_component_names() const = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
  virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// 1-D constrained double integrator. State (p, v), action is acceleration in
// [-u_max, u_max]. Reward -(p^2 + 0.1 v^2 + 0.01 u^2) * dt; unit cost when
// |v| exceeds v_limit. Fast to solve and easy to verify against value
// iteration, with the same interface as the quadrotor task.
// ---------------------------------------------------------------------------

struct IntegratorConfig {
  double dt = 0.05;
  int episode_steps = 200;
  double u_max = 1.0;
  double v_limit = 0.3;
  double start_dist_min = 1.0;  // |p0| sampled uniformly in [min, max], sign random
  double start_dist_max = 1.8;
  double p_bound = 2.0;  // position clamped to [-p_bound, p_bound]
  double v_bound = 3.0;  // velocity clamped to [-v_bound, v_bound]

  void validate() const {
    if (dt <= 0.0) throw ContractError("integrator: dt must be positive");
    if (episode_steps < 1) throw ContractError("integrator: episode_steps must be >= 1");
    if (u_max <= 0.0 || v_limit <= 0.0) throw ContractError("integrator: bounds must be positive");
  }
};

struct IntegratorState {
  double p = 0.0;
  double v = 0.0;
  int t = 0;
};

inline double integrator_reward(const IntegratorState& s, double u, const IntegratorConfig& cfg) {
  return -(s.p * s.p + 0.1 * s.v * s.v + 0.01 * u * u) * cfg.dt;
}

inline double integrator_cost(const IntegratorState& s, const IntegratorConfig& cfg) {
  return std::abs(s.v) > cfg.v_limit ? 1.0 : 0.0;
}

// Semi-implicit Euler: velocity first, then position with the new velocity.
// Both components are clamped to their physical boxes.
inline IntegratorState integrator_step(const IntegratorState& s, double u,
                                       const IntegratorConfig& cfg) {
  if (!std::isfinite(u)) throw NumericError("integrator_step: non-finite action");
  const double uc = std::clamp(u, -cfg.u_max, cfg.u_max);
  IntegratorState n;
  n.v = std::clamp(s.v + cfg.dt * uc, -cfg.v_bound, cfg.v_bound);
  n.p = std::clamp(s.p + cfg.dt * n.v, -cfg.p_bound, cfg.p_bound);
  n.t = s.t + 1;
  return n;
}

class IntegratorEnv final : public Env {
 public:
  explicit IntegratorEnv(IntegratorConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  std::vector<double> reset(std::uint64_t seed) override {
    Rng rng(seed);
    const double mag = rng.uniform(cfg_.start_dist_min, cfg_.start_dist_max);
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    state_ = IntegratorState{sign * mag, 0.0, 0};
    return observation();
  }

  CmdpStep step(std::span<const double> action) override {
    const double u = action[0];
    const IntegratorState prev = state_;
    state_ = integrator_step(prev, u, cfg_);
    CmdpStep out;
    out.reward = integrator_reward(prev, std::clamp(u, -cfg_.u_max, cfg_.u_max), cfg_);
    out.cost = integrator_cost(state_, cfg_);
    out.cost_components = {out.cost};
    out.done = state_.t >= cfg_.episode_steps;
    out.next_obs = observation();
    return out;
  }

  std::vector<double> observation() const override { return {state_.p, state_.v}; }
  int obs_dim() const override { return 2; }
  int action_dim() const override { return 1; }
  double action_bound() const override { return cfg_.u_max; }
  int episode_steps() const override { return cfg_.episode_steps; }

  double reward_abs_bound() const override {
    const double vmax = v_abs_bound();
    return (cfg_.p_bound * cfg_.p_bound + 0.1 * vmax * vmax + 0.01 * cfg_.u_max * cfg_.u_max) *
           cfg_.dt;
  }

  std::vector<std::string> cost_component_names() const override { return {"velocity"}; }

  std::unique_ptr<Env> clone() const override { return std::make_unique<IntegratorEnv>(*this); }
  std::string name() const override { return "integrator"; }

  const IntegratorConfig& config() const { return cfg_; }
  const IntegratorState& state() const { return state_; }
  void set_state(const IntegratorState& s) { state_ = s; }

  double v_abs_bound() const { return cfg_.v_bound; }

 private:
  IntegratorConfig cfg_;
  IntegratorState state_{};
};

// ---------------------------------------------------------------------------
// Planar quadrotor hover. State is the position offset from the hover target
// (x, z), velocity, pitch angle and pitch rate. The policy commands a thrust
// level and a pitch setpoint; an inner proportional-derivative loop tracks
// the setpoint. Reward follows the hover shaping (distance, velocity,
// action, boundary-hit and stay terms, all scaled by dt); the cost is a unit
// indicator on the pitch-angle limit, with two zero placeholder components
// so reports carry the same roll/pitch/yaw layout as richer models.
// ---------------------------------------------------------------------------

struct Quad2dConfig {
  double dt = 1.0 / 240.0;
  int episode_steps = 1000;
  double u_max = 1.0;
  double hover_height = 1.5;
  double mass = 0.028;
  double gravity = 9.81;
  double inertia = 1.0;  // kept for interface parity; the inner loop works in angle units
  double thrust_to_weight = 1.88;
  double angle_limit = 0.2;
  double stay_radius = 0.02;
  double box_x = 2.0;     // world |x| <= box_x
  double box_z_lo = 0.0;  // world z in [box_z_lo, box_z_hi]
  double box_z_hi = 3.0;
  double kp = 20.0;  // inner-loop attitude gains, critically damped
  double kd = 4.0;
  double max_pitch_cmd = std::numbers::pi / 4.0;
  bool literal_cost_direction = false;  // audit flag: cost fires on |angle| < limit instead
  bool terminate_on_hit = false;

  void validate() const {
    if (dt <= 0.0) throw ContractError("quad2d: dt must be positive");
    if (episode_steps < 1) throw ContractError("quad2d: episode_steps must be >= 1");
    if (angle_limit <= 0.0) throw ContractError("quad2d: angle_limit must be positive");
  }
};

// p is the offset from the hover target; world position is
// (px, pz + hover_height). theta is wrapped to (-pi, pi].
struct QuadState {
  double px = 0.0, pz = 0.0;
  double vx = 0.0, vz = 0.0;
  double theta = 0.0;
  double omega = 0.0;
  int t = 0;
};

inline double wrap_angle(double a) {
  a = std::fmod(a + std::numbers::pi, 2.0 * std::numbers::pi);
  if (a <= 0.0) a += 2.0 * std::numbers::pi;
  return a - std::numbers::pi;
}

inline std::vector<double> quad_observe(const QuadState& s) {
  return {s.px, s.pz, s.vx, s.vz, std::sin(s.theta), std::cos(s.theta), s.omega};
}

inline bool quad_outside_box(const QuadState& s, const Quad2dConfig& cfg) {
  const double wz = s.pz + cfg.hover_height;
  return std::abs(s.px) > cfg.box_x || wz < cfg.box_z_lo || wz > cfg.box_z_hi;
}

// Thrust command in [-u_max, u_max] maps affinely onto [0, t2w * g]; the
// pitch command maps onto [-max_pitch_cmd, max_pitch_cmd].
inline double quad_thrust_accel(double a_cmd, const Quad2dConfig& cfg) {
  const double x = std::clamp(a_cmd, -cfg.u_max, cfg.u_max) / cfg.u_max;
  return 0.5 * (x + 1.0) * cfg.thrust_to_weight * cfg.gravity;
}

inline double quad_pitch_setpoint(double theta_cmd, const Quad2dConfig& cfg) {
  return std::clamp(theta_cmd, -cfg.u_max, cfg.u_max) / cfg.u_max * cfg.max_pitch_cmd;
}

// Distance/velocity/stay terms are for the state the action was taken in;
// the hit term fires when the step crossed the boundary box.
inline double quad_reward(const QuadState& prev, std::span<const double> action,
                          const QuadState& next, bool hit, const Quad2dConfig& cfg) {
  (void)next;
  const double dist = std::hypot(prev.px, prev.pz);
  const double vel = std::hypot(prev.vx, prev.vz);
  double act = 0.0;
  for (double a : action) act += a * a;
  act = std::sqrt(act);
  const double r_dis = -dist;
  const double r_vel = -0.1 * vel;
  const double r_act = -act;
  const double r_hit = hit ? -1.0 : 0.0;
  const double r_sta = dist < cfg.stay_radius ? 1.5 : 0.0;
  return (r_dis + r_vel + r_act + r_hit + r_sta) * cfg.dt;
}

// Roll and yaw do not exist in the planar model; their components stay zero.
inline std::vector<double> quad_cost_components(const QuadState& s, const Quad2dConfig& cfg) {
  const bool beyond = std::abs(s.theta) > cfg.angle_limit;
  const bool fire = cfg.literal_cost_direction ? !beyond : beyond;
  return {0.0, fire ? 1.0 : 0.0, 0.0};
}

inline double quad_cost(const QuadState& s, const Quad2dConfig& cfg) {
  const auto c = quad_cost_components(s, cfg);
  return c[0] + c[1] + c[2];
}

struct QuadStepResult {
  QuadState next;
  bool hit = false;
};

inline QuadStepResult quad_step(const QuadState& s, std::span<const double> action,
                                const Quad2dConfig& cfg) {
  if (action.size() != 2) throw DimensionError("quad_step: action must have 2 components");
  for (double a : action)
    if (!std::isfinite(a)) throw NumericError("quad_step: non-finite action");

  const double accel = quad_thrust_accel(action[0], cfg);
  const double theta_sp = quad_pitch_setpoint(action[1], cfg);

  QuadState n = s;
  // Attitude inner loop, then translation; both semi-implicit.
  const double omega_dot = cfg.kp * (theta_sp - s.theta) - cfg.kd * s.omega;
  n.omega = s.omega + cfg.dt * omega_dot;
  n.theta = wrap_angle(s.theta + cfg.dt * n.omega);

  const double ax = accel * std::sin(n.theta);
  const double az = accel * std::cos(n.theta) - cfg.gravity;
  n.vx = s.vx + cfg.dt * ax;
  n.vz = s.vz + cfg.dt * az;
  n.px = s.px + cfg.dt * n.vx;
  n.pz = s.pz + cfg.dt * n.vz;
  n.t = s.t + 1;

  QuadStepResult out;
  out.hit = quad_outside_box(n, cfg);
  if (out.hit) {
    n.px = std::clamp(n.px, -cfg.box_x, cfg.box_x);
    const double wz = std::clamp(n.pz + cfg.hover_height, cfg.box_z_lo, cfg.box_z_hi);
    n.pz = wz - cfg.hover_height;
  }
  out.next = n;
  return out;
}

class Quad2dEnv final : public Env {
 public:
  explicit Quad2dEnv(Quad2dConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  std::vector<double> reset(std::uint64_t seed) override {
    Rng rng(seed);
    // Start below the target, jittered by 20% of the box dimensions.
    const double span_x = 0.2 * (2.0 * cfg_.box_x);
    const double span_z = 0.2 * (cfg_.box_z_hi - cfg_.box_z_lo);
    const double start_z_off = -1.0;  // 1 m below the hover target
    state_ = QuadState{};
    state_.px = rng.uniform(-span_x / 2.0, span_x / 2.0);
    state_.pz = start_z_off + rng.uniform(-span_z / 2.0, span_z / 2.0);
    return observation();
  }

  CmdpStep step(std::span<const double> action) override {
    std::vector<double> a(action.begin(), action.end());
    for (double& x : a) x = std::clamp(x, -cfg_.u_max, cfg_.u_max);
    const QuadState prev = state_;
    const QuadStepResult r = quad_step(prev, a, cfg_);
    state_ = r.next;
    CmdpStep out;
    out.reward = quad_reward(prev, a, state_, r.hit, cfg_);
    out.cost_components = quad_cost_components(state_, cfg_);
    out.cost = out.cost_components[0] + out.cost_components[1] + out.cost_components[2];
    out.done = state_.t >= cfg_.episode_steps || (cfg_.terminate_on_hit && r.hit);
    out.next_obs = observation();
    return out;
  }

  std::vector<double> observation() const override { return quad_observe(state_); }
  int obs_dim() const override { return 7; }
  int action_dim() const override { return 2; }
  double action_bound() const override { return cfg_.u_max; }
  int episode_steps() const override { return cfg_.episode_steps; }

  double reward_abs_bound() const override {
    // Position is clamped to the box; bound velocity by one episode of the
    // maximum thrust.
    const double pmax = std::hypot(2.0 * cfg_.box_x, cfg_.box_z_hi - cfg_.box_z_lo);
    const double vmax =
        cfg_.thrust_to_weight * cfg_.gravity * cfg_.dt * cfg_.episode_steps;
    return (pmax + 0.1 * vmax + std::sqrt(2.0) * cfg_.u_max + 1.0 + 1.5) * cfg_.dt;
  }

  std::vector<std::string> cost_component_names() const override {
    return {"roll", "pitch", "yaw"};
  }

  std::unique_ptr<Env> clone() const override { return std::make_unique<Quad2dEnv>(*this); }
  std::string name() const override { return "quad2d"; }

  const Quad2dConfig& config() const { return cfg_; }
  const QuadState& state() const { return state_; }
  void set_state(const QuadState& s) { state_ = s; }

 private:
  Quad2dConfig cfg_;
  QuadState state_{};
};

}  // namespace smac
