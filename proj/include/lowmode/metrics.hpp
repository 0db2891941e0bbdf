// Per-epoch training metrics, the metrics.csv schema, and the velocity
// series (accuracy change per unit wall time, smoothed over 3 epochs).

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lowmode {

struct MetricsRecord {
  int epoch = 0;
  double wall_time_s = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  int64_t low_iters = 0;
  int64_t full_iters = 0;
  int64_t cum_macs = 0;
  double velocity = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

// columns: epoch,wall_time_s,train_loss,val_accuracy,low_iters,full_iters,cum_macs,velocity
std::string emit_metrics_csv(const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

// (A' - A) / (tau' - tau) for each adjacent pair; throws DataError when the
// wall time is not strictly increasing or fewer than 2 records are given.
std::vector<double> raw_velocities(const std::vector<MetricsRecord>& records);

// Centered moving average of the raw series; edges use available neighbors.
std::vector<double> velocity_series(const std::vector<MetricsRecord>& records,
                                    int window_epochs = 3);

}  // namespace lowmode
