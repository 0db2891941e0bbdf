#include "lowmode/metrics.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "lowmode/tensor.hpp"

namespace lowmode {

namespace {
constexpr const char* kHeader =
    "epoch,wall_time_s,train_loss,val_accuracy,low_iters,full_iters,cum_macs,velocity";
}

std::string emit_metrics_csv(const std::vector<MetricsRecord>& records) {
  std::string out = kHeader;
  out += '\n';
  char buf[320];
  for (const auto& r : records) {
    // %.17g keeps doubles bit-exact through a parse round trip
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%" PRId64 ",%" PRId64 ",%" PRId64 ",%.17g\n",
                  r.epoch, r.wall_time_s, r.train_loss, r.val_accuracy, r.low_iters, r.full_iters,
                  r.cum_macs, r.velocity);
    out += buf;
  }
  return out;
}

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader)
    throw DataError("metrics.csv: missing or unexpected header");
  std::vector<MetricsRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    MetricsRecord r;
    const int got = std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%" SCNd64 ",%" SCNd64 ",%" SCNd64 ",%lf",
                                &r.epoch, &r.wall_time_s, &r.train_loss, &r.val_accuracy,
                                &r.low_iters, &r.full_iters, &r.cum_macs, &r.velocity);
    if (got != 8) throw DataError("metrics.csv: malformed line " + std::to_string(lineno));
    out.push_back(r);
  }
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write metrics file '" + path + "'");
  out << emit_metrics_csv(records);
  if (!out) throw IoError("failed writing metrics file '" + path + "'");
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_metrics_csv(ss.str());
}

std::vector<double> raw_velocities(const std::vector<MetricsRecord>& records) {
  if (records.size() < 2) throw DataError("velocity needs at least 2 records");
  std::vector<double> v;
  v.reserve(records.size() - 1);
  for (size_t i = 1; i < records.size(); ++i) {
    const double dt = records[i].wall_time_s - records[i - 1].wall_time_s;
    if (dt <= 0.0)
      throw DataError("wall time is not strictly increasing at record " + std::to_string(i));
    v.push_back((records[i].val_accuracy - records[i - 1].val_accuracy) / dt);
  }
  return v;
}

std::vector<double> velocity_series(const std::vector<MetricsRecord>& records, int window_epochs) {
  if (window_epochs < 1) throw ConfigError("velocity window must be >= 1");
  const std::vector<double> raw = raw_velocities(records);
  const int n = static_cast<int>(raw.size());
  const int half = window_epochs / 2;
  std::vector<double> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int lo = std::max(0, i - half), hi = std::min(n - 1, i + half);
    double s = 0.0;
    for (int j = lo; j <= hi; ++j) s += raw[static_cast<size_t>(j)];
    out[static_cast<size_t>(i)] = s / (hi - lo + 1);
  }
  return out;
}

}  // namespace lowmode
