#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "smac/error.hpp"
#include "smac/rng.hpp"

namespace smac {

// One replay record, SoA-backed inside the buffer. `done` marks true
// environment termination; episode step limits are stored as non-terminal so
// bootstrapping stays stationary across the time limit.
struct Transition {
  std::span<const double> obs;
  std::span<const double> action;
  double reward = 0.0;
  double cost = 0.0;
  std::span<const double> next_obs;
  bool done = false;
};

struct Batch {
  int size = 0;
  int obs_dim = 0;
  int act_dim = 0;
  std::vector<double> obs;       // size x obs_dim
  std::vector<double> act;       // size x act_dim
  std::vector<double> reward;    // size
  std::vector<double> cost;      // size
  std::vector<double> next_obs;  // size x obs_dim
  std::vector<double> done;      // size, 0/1
};

class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, int obs_dim, int act_dim)
      : capacity_(capacity), obs_dim_(obs_dim), act_dim_(act_dim) {
    if (capacity_ == 0) throw ContractError("ReplayBuffer: capacity must be positive");
    obs_.resize(capacity_ * obs_dim_);
    act_.resize(capacity_ * act_dim_);
    reward_.resize(capacity_);
    cost_.resize(capacity_);
    next_obs_.resize(capacity_ * obs_dim_);
    done_.resize(capacity_);
  }

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }

  void push(std::span<const double> obs, std::span<const double> action, double reward,
            double cost, std::span<const double> next_obs, bool done) {
    if (obs.size() != static_cast<std::size_t>(obs_dim_) ||
        next_obs.size() != static_cast<std::size_t>(obs_dim_) ||
        action.size() != static_cast<std::size_t>(act_dim_))
      throw DimensionError("ReplayBuffer: transition dims mismatch");
    const std::size_t i = head_;
    std::copy(obs.begin(), obs.end(), obs_.begin() + i * obs_dim_);
    std::copy(action.begin(), action.end(), act_.begin() + i * act_dim_);
    reward_[i] = reward;
    cost_[i] = cost;
    std::copy(next_obs.begin(), next_obs.end(), next_obs_.begin() + i * obs_dim_);
    done_[i] = done ? 1.0 : 0.0;
    head_ = (head_ + 1) % capacity_;
    if (size_ < capacity_) ++size_;
  }

  // Uniform sample without replacement within the batch.
  void sample(Rng& rng, int batch, Batch& out) const {
    if (batch <= 0) throw ContractError("ReplayBuffer: batch must be positive");
    if (static_cast<std::size_t>(batch) > size_)
      throw ContractError("ReplayBuffer: batch larger than contents");
    if (pool_.size() != size_) {
      pool_.resize(size_);
      for (std::size_t i = 0; i < size_; ++i) pool_[i] = i;
    }
    out.size = batch;
    out.obs_dim = obs_dim_;
    out.act_dim = act_dim_;
    out.obs.resize(static_cast<std::size_t>(batch) * obs_dim_);
    out.act.resize(static_cast<std::size_t>(batch) * act_dim_);
    out.reward.resize(batch);
    out.cost.resize(batch);
    out.next_obs.resize(static_cast<std::size_t>(batch) * obs_dim_);
    out.done.resize(batch);

    // Partial Fisher-Yates over the index pool.
    for (int k = 0; k < batch; ++k) {
      const std::size_t j = k + rng.next_u64() % (size_ - k);
      std::swap(pool_[k], pool_[j]);
      const std::size_t i = pool_[k];
      std::copy(obs_.begin() + i * obs_dim_, obs_.begin() + (i + 1) * obs_dim_,
                out.obs.begin() + static_cast<std::size_t>(k) * obs_dim_);
      std::copy(act_.begin() + i * act_dim_, act_.begin() + (i + 1) * act_dim_,
                out.act.begin() + static_cast<std::size_t>(k) * act_dim_);
      out.reward[k] = reward_[i];
      out.cost[k] = cost_[i];
      std::copy(next_obs_.begin() + i * obs_dim_, next_obs_.begin() + (i + 1) * obs_dim_,
                out.next_obs.begin() + static_cast<std::size_t>(k) * obs_dim_);
      out.done[k] = done_[i];
    }
  }

 private:
  std::size_t capacity_;
  int obs_dim_, act_dim_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
  std::vector<double> obs_, act_, reward_, cost_, next_obs_, done_;
  mutable std::vector<std::size_t> pool_;
};

}  // namespace smac
