#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "smac/autodiff.hpp"
#include "smac/error.hpp"
#include "smac/param_store.hpp"
#include "smac/rng.hpp"

namespace smac {

// 2-layer (by default) ReLU perceptron with a linear output. Entry names
// are w0/b0, w1/b1, ... in layer order.
struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden = {256, 256};
  int output_dim = 0;

  std::vector<int> layer_dims() const {
    std::vector<int> dims;
    dims.push_back(input_dim);
    for (int h : hidden) dims.push_back(h);
    dims.push_back(output_dim);
    return dims;
  }

  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }

  void validate() const {
    if (input_dim < 1 || output_dim < 1) throw ContractError("MlpSpec: dims must be >= 1");
    for (int h : hidden)
      if (h < 1) throw ContractError("MlpSpec: hidden widths must be >= 1");
  }
};

inline std::size_t param_count(const MlpSpec& spec) {
  const auto dims = spec.layer_dims();
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l)
    n += static_cast<std::size_t>(dims[l]) * dims[l + 1] + dims[l + 1];
  return n;
}

// Weights uniform in +-1/sqrt(fan_in), biases zero.
inline ParamStore init_mlp(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamStore store;
  const auto dims = spec.layer_dims();
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int fan_in = dims[l];
    const int fan_out = dims[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> w(static_cast<std::size_t>(fan_in) * fan_out);
    for (double& x : w) x = rng.uniform(-bound, bound);
    store.add("w" + std::to_string(l), {fan_in, fan_out}, std::move(w));
    store.add_zeros("b" + std::to_string(l), {1, fan_out});
  }
  return store;
}

// Scratch buffers for graph-free evaluation.
struct MlpWorkspace {
  std::vector<double> a, b;
};

// Graph-free batched forward: X is BxIn row-major, out is BxOut.
inline void mlp_eval(const ParamStore& store, const MlpSpec& spec, int batch,
                     std::span<const double> x, std::span<double> out, MlpWorkspace& ws) {
  const auto dims = spec.layer_dims();
  if (x.size() != static_cast<std::size_t>(batch) * dims.front())
    throw DimensionError("mlp_eval: input size mismatch");
  if (out.size() != static_cast<std::size_t>(batch) * dims.back())
    throw DimensionError("mlp_eval: output size mismatch");
  for (const double v : x)
    if (!std::isfinite(v)) throw NumericError("mlp_eval: non-finite input");

  ws.a.assign(x.begin(), x.end());
  const int layers = spec.layer_count();
  for (int l = 0; l < layers; ++l) {
    const int in = dims[l], on = dims[l + 1];
    const double* W = store.values("w" + std::to_string(l)).data();
    const double* bias = store.values("b" + std::to_string(l)).data();
    double* dst = (l == layers - 1) ? out.data() : (ws.b.resize(static_cast<std::size_t>(batch) * on), ws.b.data());
    // Same accumulation order as the taped matmul + add_row, so graph-free
    // and taped forwards agree bit for bit.
    for (int r = 0; r < batch; ++r) {
      double* orow = dst + static_cast<std::size_t>(r) * on;
      for (int j = 0; j < on; ++j) orow[j] = 0.0;
      const double* arow = ws.a.data() + static_cast<std::size_t>(r) * in;
      for (int k = 0; k < in; ++k) {
        const double av = arow[k];
        const double* wrow = W + static_cast<std::size_t>(k) * on;
        for (int j = 0; j < on; ++j) orow[j] += av * wrow[j];
      }
      for (int j = 0; j < on; ++j) orow[j] += bias[j];
      if (l != layers - 1)
        for (int j = 0; j < on; ++j) orow[j] = orow[j] > 0.0 ? orow[j] : 0.0;
    }
    if (l != layers - 1) std::swap(ws.a, ws.b);
  }
  for (const double v : out)
    if (!std::isfinite(v)) throw NumericError("mlp_eval: non-finite output");
}

// Registry of the tape leaves for one network, used to read gradients back
// after a backward pass.
struct TapeParams {
  std::vector<std::string> names;
  std::vector<ad::Var> vars;
};

inline ad::Var mlp_forward(ad::Tape& tape, const ParamStore& store, const MlpSpec& spec,
                           ad::Var x, TapeParams* reg = nullptr) {
  const auto dims = spec.layer_dims();
  if (tape.cols(x) != dims.front()) throw DimensionError("mlp_forward: input dim mismatch");
  ad::Var h = x;
  const int layers = spec.layer_count();
  for (int l = 0; l < layers; ++l) {
    const std::string wn = "w" + std::to_string(l), bn = "b" + std::to_string(l);
    ad::Var w = tape.leaf(dims[l], dims[l + 1], store.values(wn));
    ad::Var b = tape.leaf(1, dims[l + 1], store.values(bn));
    if (reg) {
      reg->names.push_back(wn);
      reg->vars.push_back(w);
      reg->names.push_back(bn);
      reg->vars.push_back(b);
    }
    h = tape.add_row(tape.matmul(h, w), b);
    if (l != layers - 1) h = tape.relu(h);
  }
  return h;
}

// Accumulates tape gradients into a GradientMap, reusing its storage.
inline void collect_grads(const ad::Tape& tape, const TapeParams& reg, GradientMap& out) {
  for (std::size_t i = 0; i < reg.vars.size(); ++i) {
    auto g = tape.grad(reg.vars[i]);
    auto& dst = out[reg.names[i]];
    dst.assign(g.begin(), g.end());
  }
}

// Diagonal Gaussian over actions. log_std is already clamped.
struct GaussianHead {
  std::vector<double> mean;
  std::vector<double> log_std;

  std::vector<double> std() const {
    std::vector<double> s(log_std.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::exp(log_std[i]);
    return s;
  }
};

struct PolicySpec {
  MlpSpec mlp;          // output_dim == 2 * action_dim (mean columns, then log_std)
  int action_dim = 0;
  double log_std_min = -5.0;
  double log_std_max = 2.0;
};

inline PolicySpec make_policy_spec(int input_dim, int action_dim, std::vector<int> hidden,
                                   double log_std_min = -5.0, double log_std_max = 2.0) {
  PolicySpec ps;
  ps.mlp = MlpSpec{input_dim, std::move(hidden), 2 * action_dim};
  ps.action_dim = action_dim;
  ps.log_std_min = log_std_min;
  ps.log_std_max = log_std_max;
  return ps;
}

inline GaussianHead policy_eval(const ParamStore& store, const PolicySpec& spec,
                                std::span<const double> x, MlpWorkspace& ws) {
  std::vector<double> out(2 * spec.action_dim);
  mlp_eval(store, spec.mlp, 1, x, out, ws);
  GaussianHead head;
  head.mean.assign(out.begin(), out.begin() + spec.action_dim);
  head.log_std.resize(spec.action_dim);
  for (int i = 0; i < spec.action_dim; ++i)
    head.log_std[i] = std::clamp(out[spec.action_dim + i], spec.log_std_min, spec.log_std_max);
  return head;
}

// action = mean + noise .* std
inline std::vector<double> sample_reparameterized(const GaussianHead& head,
                                                  std::span<const double> noise) {
  if (noise.size() != head.mean.size())
    throw DimensionError("sample_reparameterized: noise length mismatch");
  std::vector<double> u(head.mean.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    u[i] = head.mean[i] + noise[i] * std::exp(head.log_std[i]);
  return u;
}

// Tape version: (mean, log_std clamped) as BxA Vars.
struct PolicyHeadVars {
  ad::Var mean;
  ad::Var log_std;
};

inline PolicyHeadVars policy_forward(ad::Tape& tape, const ParamStore& store,
                                     const PolicySpec& spec, ad::Var x,
                                     TapeParams* reg = nullptr) {
  ad::Var out = mlp_forward(tape, store, spec.mlp, x, reg);
  ad::Var mean = tape.cols(out, 0, spec.action_dim);
  ad::Var log_std =
      tape.clip(tape.cols(out, spec.action_dim, 2 * spec.action_dim), spec.log_std_min,
                spec.log_std_max);
  return {mean, log_std};
}

// Distributional critic: one trunk, two output columns (mean, raw sigma).
// The emitted sigma is max(raw, sigma_min); Q mean is unconstrained.
struct CriticOutput {
  double q_mean = 0.0;
  double sigma = 0.0;
};

struct CriticSpec {
  MlpSpec mlp;  // output_dim == 2
  double sigma_min = 1.0;
};

inline CriticSpec make_critic_spec(int obs_dim, int action_dim, std::vector<int> hidden,
                                   double sigma_min = 1.0) {
  return CriticSpec{MlpSpec{obs_dim + action_dim, std::move(hidden), 2}, sigma_min};
}

inline CriticOutput critic_eval(const ParamStore& store, const CriticSpec& spec,
                                std::span<const double> x, std::span<const double> u,
                                MlpWorkspace& ws) {
  std::vector<double> in(x.size() + u.size());
  std::copy(x.begin(), x.end(), in.begin());
  std::copy(u.begin(), u.end(), in.begin() + x.size());
  std::vector<double> out(2);
  mlp_eval(store, spec.mlp, 1, in, out, ws);
  return CriticOutput{out[0], std::max(out[1], spec.sigma_min)};
}

// Batched graph-free version; writes q and sigma columns (each length B).
inline void critic_eval_batch(const ParamStore& store, const CriticSpec& spec, int batch,
                              std::span<const double> xu, std::span<double> q,
                              std::span<double> sigma, MlpWorkspace& ws) {
  std::vector<double> out(static_cast<std::size_t>(batch) * 2);
  mlp_eval(store, spec.mlp, batch, xu, out, ws);
  for (int r = 0; r < batch; ++r) {
    q[r] = out[2 * r];
    sigma[r] = std::max(out[2 * r + 1], spec.sigma_min);
  }
}

struct CriticVars {
  ad::Var q_mean;  // Bx1
  ad::Var sigma;   // Bx1, floored at sigma_min (zero gradient below the floor)
};

inline CriticVars critic_forward(ad::Tape& tape, const ParamStore& store, const CriticSpec& spec,
                                 ad::Var xu, TapeParams* reg = nullptr) {
  ad::Var out = mlp_forward(tape, store, spec.mlp, xu, reg);
  ad::Var q = tape.cols(out, 0, 1);
  ad::Var sigma =
      tape.clip(tape.cols(out, 1, 2), spec.sigma_min, std::numeric_limits<double>::infinity());
  return {q, sigma};
}

}  // namespace smac
