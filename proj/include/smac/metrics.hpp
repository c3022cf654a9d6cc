#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "smac/error.hpp"

namespace smac {

struct MetricRow {
  long long step = 0;
  long long episode = 0;
  double ret = 0.0;
  double episode_cost = 0.0;
  double lambda = 0.0;
  double q1_mean = 0.0, q2_mean = 0.0;
  double sigma1_mean = 0.0, sigma2_mean = 0.0;
  double critic_loss = 0.0, cost_critic_loss = 0.0;
  double policy_obj = 0.0, modulator_obj = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,episode,return,episode_cost,lambda,q1_mean,q2_mean,sigma1_mean,sigma2_mean,"
    "critic_loss,cost_critic_loss,policy_obj,modulator_obj";

// CSV sink. Rows are written at every episode end and at every aggregation
// boundary; coinciding events produce a single row. %.17g keeps the output
// byte-reproducible for identical runs.
class MetricsWriter {
 public:
  MetricsWriter() = default;

  explicit MetricsWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw FileError("cannot open metrics file: " + path);
    out_ << kMetricsHeader << "\n";
  }

  void write(const MetricRow& r) {
    rows_.push_back(r);
    if (!out_.is_open()) return;
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "%lld,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  r.step, r.episode, r.ret, r.episode_cost, r.lambda, r.q1_mean, r.q2_mean,
                  r.sigma1_mean, r.sigma2_mean, r.critic_loss, r.cost_critic_loss, r.policy_obj,
                  r.modulator_obj);
    out_ << buf;
  }

  void flush() {
    if (out_.is_open()) out_.flush();
  }

  const std::vector<MetricRow>& rows() const { return rows_; }

 private:
  std::ofstream out_;
  std::vector<MetricRow> rows_;
};

inline std::vector<MetricRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open metrics file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FileError("metrics file is empty: " + path);
  if (line != kMetricsHeader) throw FileError("unexpected metrics header in " + path);
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricRow r;
    std::istringstream ss(line);
    char comma;
    ss >> r.step >> comma >> r.episode >> comma >> r.ret >> comma >> r.episode_cost >> comma >>
        r.lambda >> comma >> r.q1_mean >> comma >> r.q2_mean >> comma >> r.sigma1_mean >> comma >>
        r.sigma2_mean >> comma >> r.critic_loss >> comma >> r.cost_critic_loss >> comma >>
        r.policy_obj >> comma >> r.modulator_obj;
    if (ss.fail()) throw FileError("bad metrics row in " + path + ": " + line);
    rows.push_back(r);
  }
  return rows;
}

// Episode rows only (first row per episode index; aggregate-boundary rows
// repeat the previous episode's index and are skipped).
inline std::vector<MetricRow> episode_rows(const std::vector<MetricRow>& rows) {
  std::vector<MetricRow> out;
  long long last = 0;
  for (const auto& r : rows) {
    if (r.episode > last) {
      out.push_back(r);
      last = r.episode;
    }
  }
  return out;
}

}  // namespace smac
