#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lowmode/cost.hpp"
#include "lowmode/metrics.hpp"
#include "lowmode/network.hpp"
#include "testutil.hpp"

using namespace lowmode;

TEST_CASE("conv MAC count matches the loop-count formula and the instrumented op") {
  // K=3, C_in=16, H_out=W_out=8, C_out=32 -> 9*16*8*8*32
  NetworkSpec s;
  s.name = "one-conv";
  s.input_channels = 16;
  s.input_size = 8;
  s.layers = {LayerSpec::conv("c", 16, 32, 3, 1, 1, false)};
  auto prog = compile_network(s);
  auto rep = cost_report(prog, TransformSpec::defaults(2), 16, 8, 8, 4);
  CHECK(rep.full[0].macs == 294912);
  CHECK(rep.full[0].param_count == 9 * 16 * 32);

  g_cost_counter.enabled = true;
  g_cost_counter.reset();
  auto x = testutil::random_tensor<float>({1, 16, 8, 8}, 3);
  auto w = testutil::random_tensor<float>({32, 16, 3, 3}, 4);
  conv2d_forward(x, w, ConvGeometry{3, 1, 1, 1, 16, 32});
  CHECK(g_cost_counter.conv_macs == rep.full[0].macs);
  g_cost_counter.enabled = false;
}

TEST_CASE("evenly scaled layer reduces MACs by exactly r^2 * (r_i)^2 = 16") {
  // full: 16x16 input, K=6, stride 2, no padding -> 6x6 output
  // low:   8x8  input, K=3, stride 2, no padding -> 3x3 output
  NetworkSpec s;
  s.name = "even-conv";
  s.input_channels = 4;
  s.input_size = 16;
  s.layers = {LayerSpec::conv("c", 4, 8, 6, 2, 0, true)};
  TransformSpec ts = TransformSpec::defaults(2);
  ts.add_rule(6);
  auto prog = compile_network(s);
  auto rep = cost_report(prog, ts, 4, 16, 16, 4);
  CHECK(rep.full[0].macs == 36LL * 4 * 6 * 6 * 8);
  CHECK(rep.low[0].macs * 16 == rep.full[0].macs);
  CHECK(rep.full[0].cascade.str() == "2");  // activations halve: r_i = 2
}

TEST_CASE("resnet18 low-mode conv MACs are well below 45% of full mode") {
  auto prog = compile_network(make_preset("resnet18-cifar"));
  auto rep = cost_report(prog, TransformSpec::defaults(2), 3, 32, 32, 4);
  const double ratio = static_cast<double>(rep.conv_macs(Mode::Low)) /
                       static_cast<double>(rep.conv_macs(Mode::Full));
  CHECK(ratio < 0.45);
  CHECK(ratio > 0.01);
  // low-mode never costs more at r >= 2
  for (size_t i = 0; i < rep.full.size(); ++i) CHECK(rep.low[i].macs <= rep.full[i].macs);
}

TEST_CASE("analyzer counts equal instrumented forward counters for every preset and mode") {
  for (const auto& id : preset_names()) {
    auto spec = make_preset(id, 10, 8);  // narrow widths keep this fast
    auto [net, params] = build_network<float>(spec, 9);
    auto rep = cost_report(net.program(), net.transform_spec(), 3, 32, 32, 4);
    net.refresh_transformed(params);
    for (Mode mode : {Mode::Full, Mode::Low}) {
      const int hw = mode == Mode::Full ? 32 : 16;
      for (int batch : {1, 3}) {
        auto x = testutil::random_tensor<float>({batch, 3, hw, hw}, 10);
        ForwardTrace trace;
        g_cost_counter.enabled = true;
        g_cost_counter.reset();
        net.forward(params, x, mode, false, &trace);
        g_cost_counter.enabled = false;
        const auto& layer_costs = mode == Mode::Full ? rep.full : rep.low;
        REQUIRE(trace.macs.size() == layer_costs.size());
        for (size_t i = 0; i < layer_costs.size(); ++i)
          CHECK_MESSAGE(trace.macs[i] == layer_costs[i].macs * batch,
                        id << " " << layer_costs[i].id << " " << mode_name(mode));
      }
    }
  }
}

TEST_CASE("cascade factors: stem sees r, merged interior sees 1") {
  auto prog = compile_network(make_preset("resnet18-cifar"));
  auto rep = cost_report(prog, TransformSpec::defaults(2), 3, 32, 32, 4);
  for (size_t i = 0; i < prog.ops.size(); ++i) {
    if (prog.ops[i].id == "stem.conv") CHECK(rep.full[i].cascade.str() == "2");
    if (prog.ops[i].id == "s1.b0.conv1") CHECK(rep.full[i].cascade.str() == "1");
    if (prog.ops[i].id == "s4.b1.conv2") CHECK(rep.full[i].cascade.str() == "1");
  }
}

TEST_CASE("expected training cost") {
  auto p0 = ModeSchedule::constant(0.0, 3, 0);
  p0.forced_full_window = 0;
  CHECK(expected_training_macs(100, 40, p0, 10) == doctest::Approx(3000.0));

  auto p1 = ModeSchedule::constant(1.0, 3, 0);
  p1.forced_full_window = 0;
  CHECK(expected_training_macs(100, 40, p1, 10) == doctest::Approx(1200.0));

  auto ph = ModeSchedule::constant(0.5, 1, 0);
  ph.forced_full_window = 0;
  CHECK(expected_training_macs(100, 40, ph, 10) == doctest::Approx(700.0));

  // forced windows push epochs to full cost
  auto pf = ModeSchedule::constant(0.5, 2, 0);
  pf.forced_full_window = 1;
  CHECK(expected_training_macs(100, 40, pf, 10) == doctest::Approx(1000.0 + 700.0));
}

TEST_CASE("cost table lists totals") {
  auto prog = compile_network(make_preset("tiny-cnn"));
  auto rep = cost_report(prog, TransformSpec::defaults(2), 3, 32, 32, 4);
  auto table = format_cost_table(rep);
  CHECK(table.find("total(conv)") != std::string::npos);
  CHECK(table.find("conv1") != std::string::npos);
  CHECK(table.find("(dropped)") != std::string::npos);  // the stem pool in low mode
}

TEST_CASE("velocity series") {
  std::vector<MetricsRecord> recs(3);
  recs[0] = {1, 0.0, 0, 0.1, 0, 0, 0, 0};
  recs[1] = {2, 10.0, 0, 0.2, 0, 0, 0, 0};
  recs[2] = {3, 20.0, 0, 0.3, 0, 0, 0, 0};
  auto raw = raw_velocities(recs);
  REQUIRE(raw.size() == 2);
  CHECK(raw[0] == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(raw[1] == doctest::Approx(0.01).epsilon(1e-12));

  // constant accuracy -> all velocities zero
  for (auto& r : recs) r.val_accuracy = 0.5;
  for (double v : velocity_series(recs)) CHECK(v == 0.0);

  // a drop yields a negative velocity
  recs[1].val_accuracy = 0.4;
  CHECK(raw_velocities(recs)[0] < 0.0);

  // non-increasing wall time is a data error
  recs[1].wall_time_s = 0.0;
  CHECK_THROWS_AS(raw_velocities(recs), DataError);
  CHECK_THROWS_AS(raw_velocities({recs[0]}), DataError);
}

TEST_CASE("3-epoch moving average matches a hand oracle on a random series") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> acc(0.0, 1.0);
  std::vector<MetricsRecord> recs(10);
  double t = 0.0;
  for (int i = 0; i < 10; ++i) {
    t += 1.0 + acc(rng);
    recs[static_cast<size_t>(i)] = {i + 1, t, 0.0, acc(rng), 0, 0, 0, 0};
  }
  auto smoothed = velocity_series(recs, 3);

  // hand oracle: raw quotients then explicit neighbor averaging
  std::vector<double> raw;
  for (int i = 1; i < 10; ++i)
    raw.push_back((recs[size_t(i)].val_accuracy - recs[size_t(i - 1)].val_accuracy) /
                  (recs[size_t(i)].wall_time_s - recs[size_t(i - 1)].wall_time_s));
  REQUIRE(smoothed.size() == raw.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    double s, n;
    if (i == 0) {
      s = raw[0] + raw[1];
      n = 2;
    } else if (i == raw.size() - 1) {
      s = raw[i - 1] + raw[i];
      n = 2;
    } else {
      s = raw[i - 1] + raw[i] + raw[i + 1];
      n = 3;
    }
    CHECK(smoothed[i] == doctest::Approx(s / n).epsilon(1e-12));
  }
}

TEST_CASE("metrics csv round-trips exactly") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<MetricsRecord> recs;
  for (int i = 0; i < 20; ++i) {
    MetricsRecord r;
    r.epoch = i + 1;
    r.wall_time_s = std::exp(u(rng) * 10);
    r.train_loss = u(rng) * 3;
    r.val_accuracy = (u(rng) + 1) / 2;
    r.low_iters = static_cast<int64_t>((u(rng) + 1) * 1e6);
    r.full_iters = static_cast<int64_t>((u(rng) + 1) * 1e6);
    r.cum_macs = static_cast<int64_t>((u(rng) + 1) * 1e15);
    r.velocity = u(rng) * 1e-3;
    recs.push_back(r);
  }
  auto parsed = parse_metrics_csv(emit_metrics_csv(recs));
  REQUIRE(parsed.size() == recs.size());
  for (size_t i = 0; i < recs.size(); ++i) CHECK(parsed[i] == recs[i]);

  CHECK_THROWS_AS(parse_metrics_csv("bogus\n1,2\n"), DataError);
}
