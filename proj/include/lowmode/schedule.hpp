// Per-iteration mode selection: stochastic Bernoulli draws with per-epoch
// probabilities, a fixed-period deterministic alternative, and forced
// full-mode windows at training start and after each learning-rate drop.
// Draws are pure functions of (seed, epoch, iteration).

#pragma once

#include <cstdint>
#include <vector>

#include "lowmode/netspec.hpp"

namespace lowmode {

struct LrSchedule {
  double base_lr = 0.1;
  std::vector<std::pair<int, double>> milestones;  // (epoch, lr), strictly increasing epochs

  void validate() const;
};

// Step function over milestones; epochs are 1-based.
double lr_at(const LrSchedule& s, int epoch);

enum class ModePolicy { Stochastic, Deterministic };

struct ModeSchedule {
  std::vector<double> probs;       // length E, entries in [0,1]
  int forced_full_window = 4;      // epochs after start / each LR adjustment
  std::vector<int> lr_adjust_epochs;  // sorted milestone epochs
  ModePolicy policy = ModePolicy::Stochastic;
  int period = 2;  // deterministic policy: iterations == 0 mod period run low
  uint64_t seed = 0;

  int epochs() const { return static_cast<int>(probs.size()); }
  void validate() const;

  static ModeSchedule constant(double p, int epochs, uint64_t seed);
};

// P[epoch], overridden to 0 inside any forced full-mode window (training
// start counts as an adjustment at epoch 1).
double effective_prob(const ModeSchedule& s, int epoch);

Mode next_mode(const ModeSchedule& s, int epoch, int64_t iteration);

// The raw uniform draw behind the stochastic policy, exposed for tests.
double mode_draw_uniform(uint64_t seed, int epoch, int64_t iteration);

}  // namespace lowmode
