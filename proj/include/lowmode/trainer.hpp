// The interleaved training loop: per iteration, draw a mode; full mode runs
// the ordinary forward/backward/SGD update, low mode refreshes the
// transformed kernels, runs on the paired downsampled batch, and routes the
// transformed-kernel gradients back to the original weights before the same
// SGD update. A separate plain-SGD control loop (no mode machinery at all)
// exists as the baseline reference path.

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "lowmode/checkpoint.hpp"
#include "lowmode/cost.hpp"
#include "lowmode/data.hpp"
#include "lowmode/metrics.hpp"
#include "lowmode/network.hpp"
#include "lowmode/schedule.hpp"

namespace lowmode {

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 125;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int ratio = 2;
  uint64_t seed = 1;
  int precision = 32;  // 32 or 64; consumed by the CLI dispatch
  int eval_every = 1;
  LrSchedule lr;
  ModeSchedule schedule;
  // deterministic mode: the metrics wall clock becomes cum_macs / 1e9 so two
  // identical runs produce byte-identical metrics.csv
  bool deterministic = false;
  std::string out_dir;       // empty: no metrics.csv / checkpoints on disk
  int checkpoint_every = 1;  // epochs; 0 disables checkpoints
  std::string resume_from;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    if (ratio < 2) throw ConfigError("ratio must be >= 2");
    lr.validate();
    schedule.validate();
    if (schedule.epochs() != epochs)
      throw ConfigError("mode schedule covers " + std::to_string(schedule.epochs()) +
                        " epochs, config trains " + std::to_string(epochs));
  }
};

struct TrainStats {
  int64_t low_iters = 0;
  int64_t full_iters = 0;
  double low_seconds = 0.0;
  double full_seconds = 0.0;
  double total_seconds = 0.0;
};

struct TrainOutput {
  std::vector<MetricsRecord> history;
  TrainStats stats;
};

// v <- momentum * v + (grad + weight_decay * w); w <- w - lr * v.
// Only parameters touched by the latest backward pass are stepped.
template <typename T>
void sgd_step(ParamStore<T>& params, double lr, double momentum, double weight_decay) {
  const T lr_t = static_cast<T>(lr), mom = static_cast<T>(momentum),
          wd = static_cast<T>(weight_decay);
  for (const auto& name : params.names()) {
    Param<T>& p = params.get(name);
    if (!p.touched) continue;
    T* w = p.value.ptr();
    T* g = p.grad.ptr();
    T* v = p.momentum.ptr();
    const int64_t n = p.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      v[i] = mom * v[i] + (g[i] + wd * w[i]);
      w[i] -= lr_t * v[i];
    }
    ++p.version;
  }
}

// Full-mode, full-resolution accuracy; never mutates network or parameters.
template <typename T>
double evaluate(Network<T>& net, ParamStore<T>& params, const Dataset<T>& val,
                int batch_size = 250) {
  if (val.labels.empty() || val.images.rank() != 4) throw DataError("evaluate: empty dataset");
  const int m = val.size();
  const int ch = val.images.dim(1), h = val.height(), w = val.width();
  int correct = 0;
  for (int start = 0; start < m; start += batch_size) {
    const int b = std::min(batch_size, m - start);
    Tensor<T> batch({b, ch, h, w});
    std::copy_n(val.images.ptr() + static_cast<int64_t>(start) * ch * h * w,
                static_cast<int64_t>(b) * ch * h * w, batch.ptr());
    Tensor<T> logits = net.forward(params, batch, Mode::Full, false);
    for (int j = 0; j < b; ++j) {
      const T* row = logits.ptr() + static_cast<int64_t>(j) * val.num_classes;
      int arg = 0;
      for (int k = 1; k < val.num_classes; ++k)
        if (row[k] > row[arg]) arg = k;
      if (arg == val.labels[static_cast<size_t>(start + j)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(m);
}

namespace train_detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
void emit_epoch_outputs(const TrainConfig& config, Network<T>& net, ParamStore<T>& params,
                        const std::vector<MetricsRecord>& history, int epoch) {
  if (config.out_dir.empty()) return;
  std::filesystem::create_directories(config.out_dir);
  write_metrics_csv(config.out_dir + "/metrics.csv", history);
  if (config.checkpoint_every > 0 &&
      (epoch % config.checkpoint_every == 0 || epoch == config.epochs)) {
    CheckpointMeta<T> meta;
    meta.epoch = epoch;
    meta.seed = config.seed;
    meta.history = history;
    save_checkpoint(config.out_dir + "/ckpt_epoch_" + std::to_string(epoch) + ".bin", net, params,
                    meta);
  }
}

}  // namespace train_detail

template <typename T>
TrainOutput train(Network<T>& net, ParamStore<T>& params, const PairedDataset<T>& train_data,
                  const Dataset<T>& val, const TrainConfig& config) {
  config.validate();
  if (train_data.data.size() < config.batch_size)
    throw ConfigError("training set smaller than one batch");

  std::vector<MetricsRecord> history;
  int start_epoch = 1;
  if (!config.resume_from.empty()) {
    CheckpointMeta<T> meta = load_checkpoint(config.resume_from, net, params);
    if (meta.seed != config.seed)
      throw ConfigError("checkpoint was written with seed " + std::to_string(meta.seed) +
                        ", config uses " + std::to_string(config.seed));
    history = std::move(meta.history);
    start_epoch = meta.epoch + 1;
  }

  const Program& prog = net.program();
  const CostReport rep = cost_report(prog, net.transform_spec(), prog.input_channels,
                                     prog.input_size, prog.input_size, sizeof(T));
  const int64_t full_iter_macs = rep.total_macs(Mode::Full) * config.batch_size;
  const int64_t low_iter_macs = rep.total_macs(Mode::Low) * config.batch_size;

  TrainStats stats;
  int64_t cum_macs = history.empty() ? 0 : history.back().cum_macs;
  const double base_wall = history.empty() ? 0.0 : history.back().wall_time_s;
  double last_acc = history.empty() ? 0.0 : history.back().val_accuracy;
  const auto run_start = std::chrono::steady_clock::now();

  for (int epoch = start_epoch; epoch <= config.epochs; ++epoch) {
    const double lr = lr_at(config.lr, epoch);
    EpochIterator<T> it(train_data, config.batch_size, config.seed, epoch);
    BatchPair<T> bp;
    double loss_sum = 0.0;
    int64_t iters = 0, low_iters = 0;
    while (it.next(bp)) {
      const Mode mode = next_mode(config.schedule, epoch, bp.iteration);
      const auto t0 = std::chrono::steady_clock::now();
      params.zero_grads();
      T loss;
      if (mode == Mode::Full) {
        Tensor<T> logits = net.forward(params, bp.full, Mode::Full, true);
        auto [l, grad] = softmax_cross_entropy(logits, bp.labels);
        loss = l;
        net.backward(params, grad);
      } else {
        net.refresh_transformed(params);
        Tensor<T> logits = net.forward(params, bp.low, Mode::Low, true);
        auto [l, grad] = softmax_cross_entropy(logits, bp.labels);
        loss = l;
        net.backward(params, grad);
      }
      if (!std::isfinite(static_cast<double>(loss)))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " iteration " +
                           std::to_string(bp.iteration) + " in " + mode_name(mode) + " mode");
      sgd_step(params, lr, config.momentum, config.weight_decay);
      const double dt = train_detail::seconds_since(t0);
      if (mode == Mode::Low) {
        ++low_iters;
        ++stats.low_iters;
        stats.low_seconds += dt;
        cum_macs += low_iter_macs;
      } else {
        ++stats.full_iters;
        stats.full_seconds += dt;
        cum_macs += full_iter_macs;
      }
      loss_sum += static_cast<double>(loss);
      ++iters;
    }

    if (epoch % config.eval_every == 0 || epoch == config.epochs)
      last_acc = evaluate(net, params, val);

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.wall_time_s = config.deterministic ? static_cast<double>(cum_macs) / 1e9
                                           : base_wall + train_detail::seconds_since(run_start);
    rec.train_loss = iters > 0 ? loss_sum / static_cast<double>(iters) : 0.0;
    rec.val_accuracy = last_acc;
    rec.low_iters = low_iters;
    rec.full_iters = iters - low_iters;
    rec.cum_macs = cum_macs;
    if (!history.empty() && rec.wall_time_s > history.back().wall_time_s)
      rec.velocity =
          (rec.val_accuracy - history.back().val_accuracy) /
          (rec.wall_time_s - history.back().wall_time_s);
    history.push_back(rec);
    train_detail::emit_epoch_outputs(config, net, params, history, epoch);
  }
  stats.total_seconds = train_detail::seconds_since(run_start);
  return {std::move(history), stats};
}

// Plain SGD baseline: full batches only, no scheduler, no kernel transform.
// With p_low = 0 everywhere the interleaved trainer must match this loop
// bit for bit (in deterministic mode).
template <typename T>
TrainOutput train_plain(Network<T>& net, ParamStore<T>& params, const PairedDataset<T>& train_data,
                        const Dataset<T>& val, const TrainConfig& config) {
  config.validate();
  if (train_data.data.size() < config.batch_size)
    throw ConfigError("training set smaller than one batch");

  const Program& prog = net.program();
  const CostReport rep = cost_report(prog, net.transform_spec(), prog.input_channels,
                                     prog.input_size, prog.input_size, sizeof(T));
  const int64_t full_iter_macs = rep.total_macs(Mode::Full) * config.batch_size;

  TrainStats stats;
  std::vector<MetricsRecord> history;
  int64_t cum_macs = 0;
  double last_acc = 0.0;
  const auto run_start = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = lr_at(config.lr, epoch);
    EpochIterator<T> it(train_data, config.batch_size, config.seed, epoch);
    BatchPair<T> bp;
    double loss_sum = 0.0;
    int64_t iters = 0;
    while (it.next(bp)) {
      const auto t0 = std::chrono::steady_clock::now();
      params.zero_grads();
      Tensor<T> logits = net.forward(params, bp.full, Mode::Full, true);
      auto [loss, grad] = softmax_cross_entropy(logits, bp.labels);
      net.backward(params, grad);
      if (!std::isfinite(static_cast<double>(loss)))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " iteration " +
                           std::to_string(bp.iteration) + " in full mode");
      sgd_step(params, lr, config.momentum, config.weight_decay);
      stats.full_seconds += train_detail::seconds_since(t0);
      ++stats.full_iters;
      cum_macs += full_iter_macs;
      loss_sum += static_cast<double>(loss);
      ++iters;
    }
    if (epoch % config.eval_every == 0 || epoch == config.epochs)
      last_acc = evaluate(net, params, val);
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.wall_time_s = config.deterministic ? static_cast<double>(cum_macs) / 1e9
                                           : train_detail::seconds_since(run_start);
    rec.train_loss = iters > 0 ? loss_sum / static_cast<double>(iters) : 0.0;
    rec.val_accuracy = last_acc;
    rec.low_iters = 0;
    rec.full_iters = iters;
    rec.cum_macs = cum_macs;
    if (!history.empty() && rec.wall_time_s > history.back().wall_time_s)
      rec.velocity = (rec.val_accuracy - history.back().val_accuracy) /
                     (rec.wall_time_s - history.back().wall_time_s);
    history.push_back(rec);
    train_detail::emit_epoch_outputs(config, net, params, history, epoch);
  }
  stats.total_seconds = train_detail::seconds_since(run_start);
  return {std::move(history), stats};
}

}  // namespace lowmode
