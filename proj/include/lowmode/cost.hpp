// Static per-layer, per-mode cost accounting: exact MAC counts from layer
// geometry (matching the ops' instrumented counters), activation/parameter
// footprints, cascade factors, and schedule-expected training cost.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lowmode/netspec.hpp"
#include "lowmode/schedule.hpp"

namespace lowmode {

struct Rational {
  int64_t num = 1;
  int64_t den = 1;

  Rational reduced() const;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const;
};

struct LayerCost {
  std::string id;
  PrimKind kind = PrimKind::Conv;
  Mode mode = Mode::Full;
  int64_t macs = 0;              // per example
  int64_t activation_bytes = 0;  // output tensor, per example
  int64_t param_count = 0;       // parameters used by the op in this mode
  Rational cascade;              // full-mode H_out / low-mode H_out
  bool executed = true;          // false for ops dropped in low mode
};

struct CostReport {
  std::vector<LayerCost> full;
  std::vector<LayerCost> low;

  int64_t total_macs(Mode m) const;
  int64_t conv_macs(Mode m) const;
  int64_t activation_bytes(Mode m) const;
};

// Per-example costs for one input geometry; low mode uses in_h/ratio and the
// transformed kernel geometry with the stem pool dropped.
CostReport cost_report(const Program& prog, const TransformSpec& transform, int in_c, int in_h,
                       int in_w, int scalar_bytes);

// E[cost] = sum over epochs of iters * (p_e * low + (1 - p_e) * full).
double expected_training_macs(int64_t full_iter_macs, int64_t low_iter_macs,
                              const ModeSchedule& schedule, int64_t iters_per_epoch);

// Aligned per-layer table with both modes, MAC and FLOP totals (1 MAC = 2 FLOPs).
std::string format_cost_table(const CostReport& report);

}  // namespace lowmode
