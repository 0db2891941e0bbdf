#include "lowmode/cost.hpp"

#include <cinttypes>
#include <cstdio>
#include <numeric>

namespace lowmode {

Rational Rational::reduced() const {
  const int64_t g = std::gcd(num, den);
  return g == 0 ? *this : Rational{num / g, den / g};
}

std::string Rational::str() const {
  const Rational r = reduced();
  if (r.den == 1) return std::to_string(r.num);
  return std::to_string(r.num) + "/" + std::to_string(r.den);
}

namespace {

std::vector<LayerCost> walk_costs(const Program& prog, const TransformSpec& transform, int in_c,
                                  int in_h, int in_w, Mode mode, int scalar_bytes) {
  const auto shapes = walk_shapes(prog, in_c, in_h, in_w, mode, transform);
  std::vector<LayerCost> out(prog.ops.size());
  auto shape_of = [&](int idx) -> OpShape {
    return idx < 0 ? OpShape{in_c, in_h, in_w, false} : shapes[static_cast<size_t>(idx)];
  };
  for (size_t i = 0; i < prog.ops.size(); ++i) {
    const PrimOp& op = prog.ops[i];
    const OpShape in = shape_of(op.input);
    const OpShape o = shapes[i];
    LayerCost c;
    c.id = op.id;
    c.kind = op.kind;
    c.mode = mode;
    c.activation_bytes =
        (o.flat ? static_cast<int64_t>(o.C) : static_cast<int64_t>(o.C) * o.H * o.W) *
        scalar_bytes;
    switch (op.kind) {
      case PrimKind::Conv: {
        const ConvGeometry g = effective_conv_geometry(op, mode, transform);
        c.macs = static_cast<int64_t>(g.kernel) * g.kernel * g.in_ch * o.H * o.W * g.out_ch;
        c.param_count = static_cast<int64_t>(g.kernel) * g.kernel * g.in_ch * g.out_ch;
        break;
      }
      case PrimKind::BatchNorm:
        c.macs = 2 * static_cast<int64_t>(o.C) * o.H * o.W;
        c.param_count = 2 * op.channels;
        break;
      case PrimKind::MaxPool:
      case PrimKind::AvgPool:
        if (op.skip_in_low && mode == Mode::Low) {
          c.executed = false;
          c.macs = 0;
        } else {
          c.macs = static_cast<int64_t>(o.C) * o.H * o.W * op.pool.window * op.pool.window;
        }
        break;
      case PrimKind::GlobalAvgPool:
        c.macs = static_cast<int64_t>(in.C) * in.H * in.W;
        break;
      case PrimKind::Linear:
        c.macs = static_cast<int64_t>(op.in_features) * op.out_features;
        c.param_count = static_cast<int64_t>(op.in_features) * op.out_features + op.out_features;
        break;
      case PrimKind::Relu:
      case PrimKind::Add: c.macs = 0; break;
    }
    out[i] = std::move(c);
  }
  return out;
}

}  // namespace

int64_t CostReport::total_macs(Mode m) const {
  const auto& v = m == Mode::Full ? full : low;
  int64_t s = 0;
  for (const auto& c : v) s += c.macs;
  return s;
}

int64_t CostReport::conv_macs(Mode m) const {
  const auto& v = m == Mode::Full ? full : low;
  int64_t s = 0;
  for (const auto& c : v)
    if (c.kind == PrimKind::Conv) s += c.macs;
  return s;
}

int64_t CostReport::activation_bytes(Mode m) const {
  const auto& v = m == Mode::Full ? full : low;
  int64_t s = 0;
  for (const auto& c : v)
    if (c.executed) s += c.activation_bytes;
  return s;
}

CostReport cost_report(const Program& prog, const TransformSpec& transform, int in_c, int in_h,
                       int in_w, int scalar_bytes) {
  if (in_h % transform.ratio != 0 || in_w % transform.ratio != 0)
    throw ConfigError("downsampling ratio must divide the input size");
  CostReport rep;
  rep.full = walk_costs(prog, transform, in_c, in_h, in_w, Mode::Full, scalar_bytes);
  rep.low = walk_costs(prog, transform, in_c, in_h / transform.ratio, in_w / transform.ratio,
                       Mode::Low, scalar_bytes);
  // cascade factor: spatial reduction of each op's output in low mode
  const auto fs = walk_shapes(prog, in_c, in_h, in_w, Mode::Full, transform);
  const auto ls =
      walk_shapes(prog, in_c, in_h / transform.ratio, in_w / transform.ratio, Mode::Low, transform);
  for (size_t i = 0; i < prog.ops.size(); ++i) {
    const Rational r = Rational{fs[i].H, ls[i].H}.reduced();
    rep.full[i].cascade = r;
    rep.low[i].cascade = r;
  }
  return rep;
}

double expected_training_macs(int64_t full_iter_macs, int64_t low_iter_macs,
                              const ModeSchedule& schedule, int64_t iters_per_epoch) {
  double total = 0.0;
  for (int e = 1; e <= schedule.epochs(); ++e) {
    const double p = effective_prob(schedule, e);
    total += static_cast<double>(iters_per_epoch) *
             (p * static_cast<double>(low_iter_macs) +
              (1.0 - p) * static_cast<double>(full_iter_macs));
  }
  return total;
}

std::string format_cost_table(const CostReport& report) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-24s %-14s %14s %14s %8s %9s %12s\n", "layer", "kind",
                "full MACs", "low MACs", "low/full", "cascade", "params(full)");
  out += buf;
  for (size_t i = 0; i < report.full.size(); ++i) {
    const LayerCost& f = report.full[i];
    const LayerCost& l = report.low[i];
    const double ratio =
        f.macs > 0 ? static_cast<double>(l.macs) / static_cast<double>(f.macs) : 0.0;
    std::snprintf(buf, sizeof(buf), "%-24s %-14s %14" PRId64 " %14" PRId64 " %8.3f %9s %12" PRId64 "%s\n",
                  f.id.c_str(), prim_kind_name(f.kind), f.macs, l.macs, ratio,
                  f.cascade.str().c_str(), f.param_count, l.executed ? "" : "  (dropped)");
    out += buf;
  }
  const int64_t fm = report.total_macs(Mode::Full), lm = report.total_macs(Mode::Low);
  const int64_t fc = report.conv_macs(Mode::Full), lc = report.conv_macs(Mode::Low);
  std::snprintf(buf, sizeof(buf), "%-24s %-14s %14" PRId64 " %14" PRId64 " %8.3f\n", "total(conv)", "",
                fc, lc, fc > 0 ? static_cast<double>(lc) / static_cast<double>(fc) : 0.0);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-24s %-14s %14" PRId64 " %14" PRId64 " %8.3f\n", "total(all)", "",
                fm, lm, fm > 0 ? static_cast<double>(lm) / static_cast<double>(fm) : 0.0);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-24s %-14s %14" PRId64 " %14" PRId64 "  (1 MAC = 2 FLOPs)\n",
                "total FLOPs", "", 2 * fm, 2 * lm);
  out += buf;
  std::snprintf(buf, sizeof(buf), "activation bytes/example: full %" PRId64 ", low %" PRId64 "\n",
                report.activation_bytes(Mode::Full), report.activation_bytes(Mode::Low));
  out += buf;
  return out;
}

}  // namespace lowmode
