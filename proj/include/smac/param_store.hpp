#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "smac/error.hpp"

namespace smac {

// Flat named collection of real arrays. Entry order is insertion order and
// is the serialization order. Shapes are fixed at creation.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;
  };

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  void add(const std::string& name, std::vector<int> shape, std::vector<double> data) {
    if (has(name)) throw ContractError("ParamStore: duplicate name " + name);
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    if (n != data.size()) throw DimensionError("ParamStore: shape/data mismatch for " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(shape), std::move(data)});
  }

  void add_zeros(const std::string& name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    add(name, std::move(shape), std::vector<double>(n, 0.0));
  }

  std::span<const double> values(const std::string& name) const {
    return entry(name).data;
  }
  std::span<double> values_mut(const std::string& name) {
    return entry_mut(name).data;
  }
  const std::vector<int>& shape(const std::string& name) const { return entry(name).shape; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries_mut() { return entries_; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += e.data.size();
    return n;
  }

  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t c) { step_count_ = c; }
  void bump_step_count() { ++step_count_; }

  bool same_layout(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name) return false;
      if (entries_[i].shape != other.entries_[i].shape) return false;
    }
    return true;
  }

  bool values_equal(const ParamStore& other) const {
    if (!same_layout(other)) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (std::memcmp(entries_[i].data.data(), other.entries_[i].data.data(),
                      entries_[i].data.size() * sizeof(double)) != 0)
        return false;
    return true;
  }

 private:
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore: no entry " + name);
    return entries_[it->second];
  }
  Entry& entry_mut(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore: no entry " + name);
    return entries_[it->second];
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::int64_t step_count_ = 0;
};

using GradientMap = std::map<std::string, std::vector<double>>;

// Plain gradient descent: every entry must have a matching gradient.
inline void sgd_step(ParamStore& params, const GradientMap& grads, double lr) {
  if (!(lr > 0.0)) throw ContractError("sgd_step: learning rate must be positive");
  for (auto& e : params.entries_mut()) {
    auto it = grads.find(e.name);
    if (it == grads.end()) throw ContractError("sgd_step: missing gradient for " + e.name);
    const std::vector<double>& g = it->second;
    if (g.size() != e.data.size())
      throw DimensionError("sgd_step: gradient size mismatch for " + e.name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) throw NumericError("sgd_step: non-finite gradient in " + e.name);
      e.data[i] -= lr * g[i];
    }
  }
  params.bump_step_count();
}

// target <- (1 - tau) * target + tau * online
inline void soft_update(ParamStore& target, const ParamStore& online, double tau) {
  if (!target.same_layout(online)) throw ContractError("soft_update: store layouts differ");
  const auto& src = online.entries();
  auto& dst = target.entries_mut();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const double* s = src[i].data.data();
    double* d = dst[i].data.data();
    for (std::size_t j = 0; j < dst[i].data.size(); ++j) d[j] = (1.0 - tau) * d[j] + tau * s[j];
  }
}

// Checkpoint layout: one line of compact JSON (names, shapes, step_count,
// payload size), a newline, then the raw values as little-endian 64-bit
// floats in entry order. Round-trips are value-exact.
inline void save_checkpoint(const ParamStore& store, const std::string& path) {
  nlohmann::json header;
  header["step_count"] = store.step_count();
  nlohmann::json names = nlohmann::json::array();
  std::size_t payload = 0;
  for (const auto& e : store.entries()) {
    names.push_back({{"name", e.name}, {"shape", e.shape}});
    payload += e.data.size();
  }
  header["entries"] = names;
  header["payload_doubles"] = payload;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot open checkpoint for writing: " + path);
  out << header.dump() << "\n";
  for (const auto& e : store.entries()) {
    for (double v : e.data) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      unsigned char buf[8];
      for (int k = 0; k < 8; ++k) buf[k] = static_cast<unsigned char>((bits >> (8 * k)) & 0xff);
      out.write(reinterpret_cast<const char*>(buf), 8);
    }
  }
  if (!out) throw FileError("checkpoint write failed: " + path);
}

inline ParamStore load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FileError("checkpoint missing header: " + path);
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded()) throw FileError("checkpoint header is not valid JSON: " + path);

  ParamStore store;
  store.set_step_count(header.at("step_count").get<std::int64_t>());
  for (const auto& item : header.at("entries")) {
    const std::string name = item.at("name").get<std::string>();
    const std::vector<int> shape = item.at("shape").get<std::vector<int>>();
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      unsigned char buf[8];
      if (!in.read(reinterpret_cast<char*>(buf), 8))
        throw FileError("checkpoint payload truncated: " + path);
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(buf[k]) << (8 * k);
      std::memcpy(&data[i], &bits, 8);
    }
    store.add(name, shape, std::move(data));
  }
  return store;
}

}  // namespace smac
