#include "lowmode/schedule.hpp"

#include "lowmode/tensor.hpp"

namespace lowmode {

void LrSchedule::validate() const {
  if (base_lr <= 0) throw ConfigError("lr_base must be positive");
  int prev = 0;
  for (const auto& [epoch, lr] : milestones) {
    if (epoch <= prev) throw ConfigError("lr milestones must be strictly increasing in epoch");
    if (lr <= 0) throw ConfigError("milestone learning rate must be positive");
    prev = epoch;
  }
}

double lr_at(const LrSchedule& s, int epoch) {
  double lr = s.base_lr;
  for (const auto& [e, v] : s.milestones) {
    if (epoch >= e) lr = v;
  }
  return lr;
}

void ModeSchedule::validate() const {
  if (probs.empty()) throw ConfigError("mode schedule needs at least one epoch");
  for (double p : probs)
    if (!(p >= 0.0 && p <= 1.0))
      throw ConfigError("p_low entries must lie in [0,1], got " + std::to_string(p));
  if (forced_full_window < 0) throw ConfigError("forced_full_window must be >= 0");
  if (policy == ModePolicy::Deterministic && period < 1)
    throw ConfigError("deterministic policy needs period >= 1");
  int prev = 0;
  for (int e : lr_adjust_epochs) {
    if (e <= prev) throw ConfigError("lr_adjust_epochs must be strictly increasing");
    prev = e;
  }
}

ModeSchedule ModeSchedule::constant(double p, int epochs, uint64_t seed) {
  ModeSchedule s;
  s.probs.assign(static_cast<size_t>(epochs), p);
  s.seed = seed;
  return s;
}

double effective_prob(const ModeSchedule& s, int epoch) {
  if (epoch < 1 || epoch > s.epochs())
    throw ConfigError("epoch " + std::to_string(epoch) + " outside schedule of length " +
                      std::to_string(s.epochs()));
  // training start behaves like an adjustment at epoch 1
  if (epoch - 1 < s.forced_full_window) return 0.0;
  for (int a : s.lr_adjust_epochs)
    if (epoch >= a && epoch - a < s.forced_full_window) return 0.0;
  return s.probs[static_cast<size_t>(epoch - 1)];
}

namespace {
uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
}  // namespace

double mode_draw_uniform(uint64_t seed, int epoch, int64_t iteration) {
  uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<uint64_t>(epoch));
  h = splitmix64(h ^ static_cast<uint64_t>(iteration));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

Mode next_mode(const ModeSchedule& s, int epoch, int64_t iteration) {
  const double p = effective_prob(s, epoch);
  if (p <= 0.0) return Mode::Full;
  if (s.policy == ModePolicy::Deterministic)
    return (iteration % s.period == 0) ? Mode::Low : Mode::Full;
  return mode_draw_uniform(s.seed, epoch, iteration) < p ? Mode::Low : Mode::Full;
}

}  // namespace lowmode
