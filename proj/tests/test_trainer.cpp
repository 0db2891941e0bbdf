#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "lowmode/trainer.hpp"
#include "testutil.hpp"

using namespace lowmode;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag)
      : path(fs::temp_directory_path() / (std::string("lowmode_trainer_") + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

TrainConfig small_config(int epochs, double p_low, uint64_t seed) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 25;
  c.momentum = 0.9;
  c.weight_decay = 5e-4;
  c.seed = seed;
  c.lr.base_lr = 0.05;
  c.schedule = ModeSchedule::constant(p_low, epochs, seed);
  c.schedule.forced_full_window = 0;
  c.checkpoint_every = 0;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("sgd_step hand-computed cases") {
  ParamStore<double> params;
  params.add("w", Tensor<double>::full({1}, 1.0));

  // vanilla: w' = w - lr * g
  auto& p = params.get("w");
  p.grad.data[0] = 0.25;
  p.touched = true;
  sgd_step(params, 0.1, 0.0, 0.0);
  CHECK(p.value.data[0] == doctest::Approx(1.0 - 0.1 * 0.25).epsilon(1e-15));
  CHECK(p.version == 1);

  // two momentum steps with constant unit gradient: w1 = 0.9, w2 = 0.71
  ParamStore<double> ps2;
  auto& q = ps2.add("w", Tensor<double>::full({1}, 1.0));
  q.grad.data[0] = 1.0;
  q.touched = true;
  sgd_step(ps2, 0.1, 0.9, 0.0);
  CHECK(q.value.data[0] == doctest::Approx(0.9).epsilon(1e-15));
  q.grad.data[0] = 1.0;
  q.touched = true;
  sgd_step(ps2, 0.1, 0.9, 0.0);
  CHECK(q.value.data[0] == doctest::Approx(0.71).epsilon(1e-15));

  // zero grad: velocity decays geometrically
  q.grad.data[0] = 0.0;
  const double v_before = q.momentum.data[0];
  sgd_step(ps2, 0.1, 0.9, 0.0);
  CHECK(q.momentum.data[0] == doctest::Approx(0.9 * v_before).epsilon(1e-15));
}

TEST_CASE("untouched parameters are bit-unchanged by sgd_step") {
  ParamStore<double> params;
  auto& a = params.add("touched", Tensor<double>::full({3}, 1.0));
  auto& b = params.add("skipped", Tensor<double>::full({3}, 2.0));
  b.momentum.data[0] = 0.7;  // pre-existing velocity must not decay either
  params.zero_grads();
  a.grad.data[1] = 1.0;
  a.touched = true;
  sgd_step(params, 0.1, 0.9, 1e-2);  // decay on, but only for touched params
  CHECK(b.value.data == std::vector<double>{2.0, 2.0, 2.0});
  CHECK(b.momentum.data[0] == 0.7);
  CHECK(b.version == 0);
  CHECK(a.value.data[1] != 1.0);
  CHECK(a.value.data[0] != 1.0);  // weight decay moves touched params everywhere
}

TEST_CASE("one low-mode update equals the end-to-end composed oracle (tiny-cnn)") {
  const auto spec = make_preset("tiny-cnn");
  auto [net, params] = build_network<double>(spec, 3);
  auto [train_ds, val_ds] = make_synthetic_dataset<double>(40, 10, 5);
  (void)val_ds;
  auto paired = PairedDataset<double>::make(std::move(train_ds), DownsampleSpec{});
  EpochIterator<double> it(paired, 8, 11, 1);
  BatchPair<double> bp;
  REQUIRE(it.next(bp));

  // snapshot of the initial weights for the oracle
  auto w1_0 = params.get("conv1.weight").value;
  auto w2_0 = params.get("conv2.weight").value;
  auto fcw_0 = params.get("fc.weight").value;
  auto fcb_0 = params.get("fc.bias").value;

  // artifact path: refresh, low-mode forward/backward, SGD step
  params.zero_grads();
  net.refresh_transformed(params);
  auto logits = net.forward(params, bp.low, Mode::Low, true);
  auto [loss, lgrad] = softmax_cross_entropy(logits, bp.labels);
  (void)loss;
  net.backward(params, lgrad);
  auto g_w1 = params.get("conv1.weight").grad;
  auto g_w2 = params.get("conv2.weight").grad;
  auto g_fcw = params.get("fc.weight").grad;
  auto g_fcb = params.get("fc.bias").grad;
  const double lr = 0.1, wd = 5e-4;
  sgd_step(params, lr, 0.0, wd);

  // oracle: differentiate loss(f_hat(x; T(W))) as one straight-line program
  const auto& rule = net.transform_spec().rule_for(3);
  auto w1h = transform_kernels(w1_0, rule);
  auto w2h = transform_kernels(w2_0, rule);
  const int c1 = w1_0.dim(0), c2 = w2_0.dim(0);
  ConvGeometry g1{1, 1, 0, 0, 3, c1}, g2{1, 1, 0, 0, c1, c2};
  auto a = conv2d_forward(bp.low, w1h, g1);
  auto b = relu_forward(a);
  // pool1 is dropped in low mode
  auto c = conv2d_forward(b, w2h, g2);
  auto d = relu_forward(c);
  auto e = global_avgpool_forward(d);
  auto f = linear_forward(e, fcw_0, fcb_0);
  auto [oloss, gf] = softmax_cross_entropy(f, bp.labels);
  (void)oloss;
  auto lb = linear_backward(gf, e, fcw_0);
  auto gd = global_avgpool_backward(lb.input, d.shape);
  auto gc = relu_backward(gd, c);
  auto [gb, g_w2h] = conv2d_backward(gc, b, w2h, g2);
  auto ga = relu_backward(gb, a);
  auto [gx, g_w1h] = conv2d_backward(ga, bp.low, w1h, g1);
  (void)gx;
  auto o_gw1 = backprop_through_transform(g_w1h, w1_0.shape, rule);
  auto o_gw2 = backprop_through_transform(g_w2h, w2_0.shape, rule);

  CHECK(testutil::max_rel_err(g_w1, o_gw1, 1e-9) < 1e-12);
  CHECK(testutil::max_rel_err(g_w2, o_gw2, 1e-9) < 1e-12);
  CHECK(testutil::max_rel_err(g_fcw, lb.weight, 1e-9) < 1e-12);
  CHECK(testutil::max_rel_err(g_fcb, lb.bias, 1e-9) < 1e-12);

  // the oracle's Eq-4 update must match the stepped parameters
  auto apply = [&](const Tensor<double>& w0, const Tensor<double>& g) {
    Tensor<double> w = w0;
    for (int64_t i = 0; i < w.numel(); ++i)
      w.data[i] -= lr * (g.data[i] + wd * w0.data[i]);
    return w;
  };
  CHECK(testutil::max_rel_err(params.get("conv1.weight").value, apply(w1_0, o_gw1), 1e-9) < 1e-12);
  CHECK(testutil::max_rel_err(params.get("conv2.weight").value, apply(w2_0, o_gw2), 1e-9) < 1e-12);

  // independent cross-check: finite differences through the production
  // transform machinery (bump version -> refresh -> low forward)
  auto& p1 = params.get("conv1.weight");
  p1.value = w1_0;
  params.get("conv2.weight").value = w2_0;
  params.get("fc.weight").value = fcw_0;
  params.get("fc.bias").value = fcb_0;
  auto fd_loss = [&]() {
    ++p1.version;
    net.refresh_transformed(params);
    auto lg = net.forward(params, bp.low, Mode::Low, true);
    return softmax_cross_entropy(lg, bp.labels).first;
  };
  std::mt19937_64 rng(13);
  for (int probe = 0; probe < 10; ++probe) {
    const int64_t idx = std::uniform_int_distribution<int64_t>(0, p1.value.numel() - 1)(rng);
    const double orig = p1.value.data[idx], step = 1e-5;
    p1.value.data[idx] = orig + step;
    const double lp = fd_loss();
    p1.value.data[idx] = orig - step;
    const double lm = fd_loss();
    p1.value.data[idx] = orig;
    CHECK(testutil::rel_err(o_gw1.data[idx], (lp - lm) / (2 * step), 1e-3) < 1e-5);
  }
}

TEST_CASE("p_low = 0 is bitwise identical to the plain SGD control path") {
  TempDir d1("p0"), d2("plain");
  auto cfg = small_config(3, 0.0, 17);
  cfg.deterministic = true;
  cfg.checkpoint_every = 0;

  auto [tr1, va1] = make_synthetic_dataset<float>(100, 30, 23);
  auto paired1 = PairedDataset<float>::make(std::move(tr1), DownsampleSpec{});
  auto [net1, params1] = build_network<float>(make_preset("resnet8-tiny"), cfg.seed);
  auto cfg1 = cfg;
  cfg1.out_dir = d1.path.string();
  auto out1 = train(net1, params1, paired1, va1, cfg1);

  auto [tr2, va2] = make_synthetic_dataset<float>(100, 30, 23);
  auto paired2 = PairedDataset<float>::make(std::move(tr2), DownsampleSpec{});
  auto [net2, params2] = build_network<float>(make_preset("resnet8-tiny"), cfg.seed);
  auto cfg2 = cfg;
  cfg2.out_dir = d2.path.string();
  auto out2 = train_plain(net2, params2, paired2, va2, cfg2);

  CHECK(out1.stats.low_iters == 0);
  CHECK(out1.history.size() == out2.history.size());
  for (size_t i = 0; i < out1.history.size(); ++i) CHECK(out1.history[i] == out2.history[i]);
  CHECK(slurp(d1.path / "metrics.csv") == slurp(d2.path / "metrics.csv"));
  for (const auto& name : params1.names())
    CHECK(params1.get(name).value.data == params2.get(name).value.data);
  auto bn1 = net1.bn_states(), bn2 = net2.bn_states();
  for (size_t i = 0; i < bn1.size(); ++i) {
    CHECK(bn1[i].mean_full->data == bn2[i].mean_full->data);
    CHECK(bn1[i].var_full->data == bn2[i].var_full->data);
  }
}

TEST_CASE("deterministic rerun reproduces metrics.csv bitwise") {
  TempDir d1("rep1"), d2("rep2");
  auto cfg = small_config(2, 0.5, 5);
  cfg.deterministic = true;
  auto run = [&](const std::string& dir) {
    auto [tr, va] = make_synthetic_dataset<float>(75, 25, 9);
    auto paired = PairedDataset<float>::make(std::move(tr), DownsampleSpec{});
    auto [net, params] = build_network<float>(make_preset("tiny-cnn"), cfg.seed);
    auto c = cfg;
    c.out_dir = dir;
    train(net, params, paired, va, c);
  };
  run(d1.path.string());
  run(d2.path.string());
  CHECK(slurp(d1.path / "metrics.csv") == slurp(d2.path / "metrics.csv"));
}

TEST_CASE("interleaved run mixes modes and learns on the synthetic task") {
  auto cfg = small_config(8, 0.5, 3);
  cfg.schedule.forced_full_window = 1;
  auto [tr, va] = make_synthetic_dataset<float>(300, 100, 31);
  auto paired = PairedDataset<float>::make(std::move(tr), DownsampleSpec{});
  auto [net, params] = build_network<float>(make_preset("tiny-cnn"), cfg.seed);
  auto out = train(net, params, paired, va, cfg);
  CHECK(out.stats.low_iters > 0);
  CHECK(out.stats.full_iters > 0);
  CHECK(out.history.back().val_accuracy > 0.5);
  for (const auto& r : out.history) CHECK(std::isfinite(r.train_loss));
  // epoch 1 is forced full
  CHECK(out.history.front().low_iters == 0);
}

TEST_CASE("cum_macs matches the analyzer's expected cost at p in {0,1}") {
  for (double p : {0.0, 1.0}) {
    auto cfg = small_config(2, p, 7);
    auto [tr, va] = make_synthetic_dataset<float>(50, 20, 41);
    auto paired = PairedDataset<float>::make(std::move(tr), DownsampleSpec{});
    auto [net, params] = build_network<float>(make_preset("tiny-cnn"), cfg.seed);
    auto out = train(net, params, paired, va, cfg);
    const auto& prog = net.program();
    auto rep = cost_report(prog, net.transform_spec(), 3, 32, 32, sizeof(float));
    const int64_t iters_per_epoch = 50 / cfg.batch_size;
    const double expected = expected_training_macs(rep.total_macs(Mode::Full) * cfg.batch_size,
                                                   rep.total_macs(Mode::Low) * cfg.batch_size,
                                                   cfg.schedule, iters_per_epoch);
    CHECK(static_cast<double>(out.history.back().cum_macs) == doctest::Approx(expected));
  }
}

TEST_CASE("evaluate") {
  // untrained 10-class accuracy is chance level; permuting the balanced
  // labels removes any image/label correlation so each seed concentrates
  // tightly around 0.1
  auto [tr, va] = make_synthetic_dataset<float>(20, 1000, 51);
  (void)tr;
  std::mt19937_64 shuffle_rng(99);
  std::shuffle(va.labels.begin(), va.labels.end(), shuffle_rng);
  for (uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    auto [net, params] = build_network<float>(make_preset("tiny-cnn"), seed);
    const double acc = evaluate(net, params, va);
    CHECK(acc > 0.07);
    CHECK(acc < 0.13);
  }

  // a hand-built network that reads the label off the input is always right
  NetworkSpec s;
  s.name = "perfect";
  s.num_classes = 4;
  s.input_channels = 4;
  s.input_size = 8;
  s.layers = {LayerSpec::global_avgpool("gap"), LayerSpec::linear("fc", 4, 4)};
  auto [pnet, pparams] = build_network<float>(s, 1);
  auto& w = pparams.get("fc.weight");
  std::fill(w.value.data.begin(), w.value.data.end(), 0.0f);
  for (int k = 0; k < 4; ++k) w.value.data[k * 4 + k] = 1.0f;  // identity readout
  std::fill(pparams.get("fc.bias").value.data.begin(), pparams.get("fc.bias").value.data.end(),
            0.0f);
  Dataset<float> perfect;
  perfect.num_classes = 4;
  perfect.split = "val";
  perfect.images = Tensor<float>::zeros({40, 4, 8, 8});
  for (int i = 0; i < 40; ++i) {
    const int cls = i % 4;
    perfect.labels.push_back(cls);
    for (int j = 0; j < 64; ++j)
      perfect.images.data[(static_cast<int64_t>(i) * 4 + cls) * 64 + j] = 1.0f;
  }
  CHECK(evaluate(pnet, pparams, perfect) == 1.0);

  Dataset<float> empty;
  CHECK_THROWS_AS(evaluate(pnet, pparams, empty), DataError);
}

TEST_CASE("evaluate never mutates parameters or BN statistics") {
  auto [net, params] = build_network<float>(make_preset("resnet8-tiny"), 61);
  auto [tr, va] = make_synthetic_dataset<float>(20, 50, 62);
  (void)tr;
  std::vector<std::vector<float>> before;
  for (const auto& name : params.names()) before.push_back(params.get(name).value.data);
  std::vector<std::vector<float>> bn_before;
  for (auto& bn : net.bn_states()) {
    bn_before.push_back(bn.mean_full->data);
    bn_before.push_back(bn.var_full->data);
    bn_before.push_back(bn.mean_low->data);
    bn_before.push_back(bn.var_low->data);
  }
  evaluate(net, params, va);
  size_t i = 0;
  for (const auto& name : params.names()) CHECK(params.get(name).value.data == before[i++]);
  i = 0;
  for (auto& bn : net.bn_states()) {
    CHECK(bn.mean_full->data == bn_before[i++]);
    CHECK(bn.var_full->data == bn_before[i++]);
    CHECK(bn.mean_low->data == bn_before[i++]);
    CHECK(bn.var_low->data == bn_before[i++]);
  }
}

TEST_CASE("non-finite loss aborts with epoch, iteration and mode") {
  auto cfg = small_config(2, 0.0, 71);
  cfg.lr.base_lr = 1e18;  // guaranteed blow-up without batch norm
  auto [tr, va] = make_synthetic_dataset<float>(50, 10, 72);
  auto paired = PairedDataset<float>::make(std::move(tr), DownsampleSpec{});
  auto [net, params] = build_network<float>(make_preset("tiny-cnn"), cfg.seed);
  try {
    train(net, params, paired, va, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch") != std::string::npos);
    CHECK(msg.find("iteration") != std::string::npos);
    CHECK(msg.find("mode") != std::string::npos);
  }
}

TEST_CASE("checkpoint resume continues bit-identically") {
  TempDir base("resume_base"), split(
      "resume_split");
  auto make_data = [] {
    auto [tr, va] = make_synthetic_dataset<float>(100, 25, 81);
    return std::make_pair(PairedDataset<float>::make(std::move(tr), DownsampleSpec{}), va);
  };

  // uninterrupted 6-epoch run
  auto cfg = small_config(6, 0.5, 19);
  cfg.deterministic = true;
  cfg.checkpoint_every = 1;
  cfg.out_dir = base.path.string();
  auto [paired_a, val_a] = make_data();
  auto [net_a, params_a] = build_network<float>(make_preset("resnet8-tiny"), cfg.seed);
  auto full_run = train(net_a, params_a, paired_a, val_a, cfg);

  // 3 epochs, then resume from the checkpoint for the remaining 3
  auto cfg_head = cfg;
  cfg_head.epochs = 3;
  cfg_head.schedule.probs.resize(3);
  cfg_head.out_dir = split.path.string();
  auto [paired_b, val_b] = make_data();
  auto [net_b, params_b] = build_network<float>(make_preset("resnet8-tiny"), cfg.seed);
  train(net_b, params_b, paired_b, val_b, cfg_head);

  auto cfg_tail = cfg;
  cfg_tail.out_dir = split.path.string();
  cfg_tail.resume_from = (split.path / "ckpt_epoch_3.bin").string();
  auto [net_c, params_c] = build_network<float>(make_preset("resnet8-tiny"), cfg.seed + 999);
  auto resumed = train(net_c, params_c, paired_b, val_b, cfg_tail);

  REQUIRE(resumed.history.size() == full_run.history.size());
  for (size_t i = 0; i < full_run.history.size(); ++i)
    CHECK(resumed.history[i] == full_run.history[i]);
  for (const auto& name : params_a.names())
    CHECK(params_a.get(name).value.data == params_c.get(name).value.data);
  CHECK(slurp(base.path / "metrics.csv") == slurp(split.path / "metrics.csv"));

  // wrong seed is rejected
  auto cfg_bad = cfg_tail;
  cfg_bad.seed = 1234;
  cfg_bad.schedule.seed = 1234;
  auto [net_d, params_d] = build_network<float>(make_preset("resnet8-tiny"), 1234);
  CHECK_THROWS_AS(train(net_d, params_d, paired_b, val_b, cfg_bad), ConfigError);
}

TEST_CASE("config validation") {
  auto cfg = small_config(3, 0.5, 1);
  cfg.schedule.probs.resize(2);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config(3, 1.5, 1);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config(3, 0.5, 1);
  cfg.precision = 16;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
