// Runtime network: executes a compiled Program in full or low mode with a
// named parameter store. Transformable convolutions own a KernelBank whose
// cache must be refreshed (Algorithm line "What = T(W)") before low-mode
// forward passes; their low-mode weight gradients are routed back to the
// original parameters through the transform's backward.

#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "lowmode/kernel_transform.hpp"
#include "lowmode/netspec.hpp"
#include "lowmode/ops.hpp"
#include "lowmode/tensor.hpp"

namespace lowmode {

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> momentum;
  uint64_t version = 0;  // bumped by every optimizer step
  bool touched = false;  // grad populated since the last zero_grads
};

template <typename T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Tensor<T> value) {
    if (map_.count(name)) throw StateError("duplicate parameter '" + name + "'");
    Param<T> p;
    p.grad = Tensor<T>::zeros(value.shape);
    p.momentum = Tensor<T>::zeros(value.shape);
    p.value = std::move(value);
    order_.push_back(name);
    return map_.emplace(name, std::move(p)).first->second;
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  Param<T>& get(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw StateError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Param<T>& get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw StateError("unknown parameter '" + name + "'");
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }

  void zero_grads() {
    for (auto& [name, p] : map_) {
      std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
      p.touched = false;
    }
  }

  void accumulate_grad(const std::string& name, const Tensor<T>& g) {
    Param<T>& p = get(name);
    if (!p.grad.same_shape(g))
      throw ShapeError("gradient shape " + shape_str(g.shape) + " does not match parameter '" +
                       name + "' " + shape_str(p.value.shape));
    for (int64_t i = 0; i < g.numel(); ++i) p.grad.data[i] += g.data[i];
    p.touched = true;
  }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& name : order_) n += get(name).value.numel();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Param<T>> map_;
};

// Optional per-op record of a forward pass, for layer traces and for checking
// the static cost analysis against instrumented counters.
struct ForwardTrace {
  std::vector<std::string> ids;
  std::vector<std::vector<int>> shapes;
  std::vector<int64_t> macs;
  std::vector<bool> executed;  // false for ops dropped in low mode
};

template <typename T>
class Network {
 public:
  Network(Program prog, TransformSpec transform)
      : prog_(std::move(prog)), transform_(std::move(transform)), state_(prog_.ops.size()) {}

  const Program& program() const { return prog_; }
  const TransformSpec& transform_spec() const { return transform_; }

  // Parameter creation + He-uniform init, deterministic in the seed.
  void init_params(ParamStore<T>& params, uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (size_t i = 0; i < prog_.ops.size(); ++i) {
      const PrimOp& op = prog_.ops[i];
      switch (op.kind) {
        case PrimKind::Conv: {
          Tensor<T> w({op.conv.out_ch, op.conv.in_ch, op.conv.kernel, op.conv.kernel});
          const T bound =
              std::sqrt(T(6) / static_cast<T>(op.conv.in_ch * op.conv.kernel * op.conv.kernel));
          fill_uniform(w, rng, -bound, bound);
          params.add(op.id + ".weight", std::move(w));
          if (op.transformable)
            state_[i].bank.rule = transform_.rule_for(op.conv.kernel);
          break;
        }
        case PrimKind::BatchNorm: {
          params.add(op.id + ".gamma", Tensor<T>::full({op.channels}, T(1)));
          params.add(op.id + ".beta", Tensor<T>::zeros({op.channels}));
          state_[i].running_mean_full = Tensor<T>::zeros({op.channels});
          state_[i].running_var_full = Tensor<T>::full({op.channels}, T(1));
          state_[i].running_mean_low = Tensor<T>::zeros({op.channels});
          state_[i].running_var_low = Tensor<T>::full({op.channels}, T(1));
          break;
        }
        case PrimKind::Linear: {
          Tensor<T> w({op.out_features, op.in_features});
          const T bound = std::sqrt(T(6) / static_cast<T>(op.in_features));
          fill_uniform(w, rng, -bound, bound);
          params.add(op.id + ".weight", std::move(w));
          params.add(op.id + ".bias", Tensor<T>::zeros({op.out_features}));
          break;
        }
        default: break;
      }
    }
  }

  // Recompute stale transformed-kernel caches (start of a low-mode iteration).
  void refresh_transformed(const ParamStore<T>& params) {
    for (size_t i = 0; i < prog_.ops.size(); ++i) {
      const PrimOp& op = prog_.ops[i];
      if (op.kind != PrimKind::Conv || !op.transformable) continue;
      const Param<T>& p = params.get(op.id + ".weight");
      state_[i].bank.refresh_if_dirty(p.value, p.version);
    }
  }

  KernelBank<T>& bank_of(const std::string& op_id) {
    for (size_t i = 0; i < prog_.ops.size(); ++i)
      if (prog_.ops[i].id == op_id && prog_.ops[i].transformable) return state_[i].bank;
    throw StateError("no transformable conv named '" + op_id + "'");
  }

  Tensor<T> forward(ParamStore<T>& params, const Tensor<T>& batch, Mode mode, bool training,
                    ForwardTrace* trace = nullptr) {
    validate_input(batch, mode);
    const size_t n_ops = prog_.ops.size();
    values_.assign(n_ops, Tensor<T>());
    if (trace) {
      trace->ids.clear();
      trace->shapes.clear();
      trace->macs.clear();
      trace->executed.clear();
    }
    input_ = batch;
    for (size_t i = 0; i < n_ops; ++i) {
      const PrimOp& op = prog_.ops[i];
      const Tensor<T>& in = value_of(op.input);
      const int64_t macs_before = g_cost_counter.total();
      bool executed = true;
      switch (op.kind) {
        case PrimKind::Conv: {
          const ConvGeometry g = effective_conv_geometry(op, mode, transform_);
          const Tensor<T>& w = conv_weights(params, i, op, mode);
          values_[i] = conv2d_forward(in, w, g);
          break;
        }
        case PrimKind::BatchNorm: {
          const Tensor<T>& gamma = params.get(op.id + ".gamma").value;
          const Tensor<T>& beta = params.get(op.id + ".beta").value;
          OpState& st = state_[i];
          Tensor<T>& rm = (mode == Mode::Low) ? st.running_mean_low : st.running_mean_full;
          Tensor<T>& rv = (mode == Mode::Low) ? st.running_var_low : st.running_var_full;
          // eval always reads full-mode statistics
          values_[i] = training
                           ? batchnorm_forward(in, gamma, beta, rm, rv, true, &st.bn_ctx)
                           : batchnorm_forward<T>(in, gamma, beta, st.running_mean_full,
                                                  st.running_var_full, false, nullptr);
          break;
        }
        case PrimKind::Relu: values_[i] = relu_forward(in); break;
        case PrimKind::MaxPool: {
          if (op.skip_in_low && mode == Mode::Low) {
            values_[i] = in;
            executed = false;
            break;
          }
          auto res = maxpool2d_forward(in, op.pool);
          values_[i] = std::move(res.output);
          state_[i].argmax = std::move(res.argmax);
          break;
        }
        case PrimKind::AvgPool: {
          if (op.skip_in_low && mode == Mode::Low) {
            values_[i] = in;
            executed = false;
            break;
          }
          values_[i] = avgpool2d_forward(in, op.pool);
          break;
        }
        case PrimKind::GlobalAvgPool: values_[i] = global_avgpool_forward(in); break;
        case PrimKind::Linear:
          values_[i] = linear_forward(in, params.get(op.id + ".weight").value,
                                      params.get(op.id + ".bias").value);
          break;
        case PrimKind::Add: values_[i] = add(in, value_of(op.skip)); break;
      }
      if (trace) {
        trace->ids.push_back(op.id);
        trace->shapes.push_back(values_[i].shape);
        trace->macs.push_back(g_cost_counter.total() - macs_before);
        trace->executed.push_back(executed);
      }
    }
    Tensor<T> logits = values_.back();
    if (training) {
      have_cache_ = true;
      cached_mode_ = mode;
    } else {
      have_cache_ = false;
      values_.clear();
    }
    return logits;
  }

  // Populates gradients in the store for every parameter touched by the
  // cached forward pass. Transformable conv gradients arrive in transformed
  // shape and are routed through the Eq-4 backward step in low mode.
  void backward(ParamStore<T>& params, const Tensor<T>& loss_grad) {
    if (!have_cache_) throw StateError("backward called without a preceding training forward");
    const Mode mode = cached_mode_;
    const size_t n_ops = prog_.ops.size();
    // slot 0 = network input, slot i+1 = op i output
    std::vector<Tensor<T>> gv(n_ops + 1);
    if (!loss_grad.same_shape(values_.back()))
      throw ShapeError("loss gradient " + shape_str(loss_grad.shape) + " does not match logits " +
                       shape_str(values_.back().shape));
    gv[n_ops] = loss_grad;
    auto push = [&](int producer, Tensor<T>&& g) {
      Tensor<T>& slot = gv[static_cast<size_t>(producer + 1)];
      if (slot.numel() == 0)
        slot = std::move(g);
      else
        for (int64_t j = 0; j < slot.numel(); ++j) slot.data[j] += g.data[j];
    };
    for (size_t ri = n_ops; ri-- > 0;) {
      const PrimOp& op = prog_.ops[ri];
      Tensor<T>& gout = gv[ri + 1];
      if (gout.numel() == 0) continue;  // unused output
      const Tensor<T>& in = value_of(op.input);
      switch (op.kind) {
        case PrimKind::Conv: {
          const ConvGeometry g = effective_conv_geometry(op, mode, transform_);
          const Tensor<T>& w = conv_weights(params, ri, op, mode);
          auto [gx, gw] = conv2d_backward(gout, in, w, g);
          if (mode == Mode::Low && op.transformable) {
            const Param<T>& p = params.get(op.id + ".weight");
            params.accumulate_grad(
                op.id + ".weight",
                backprop_through_transform(gw, p.value.shape, state_[ri].bank.rule));
          } else {
            params.accumulate_grad(op.id + ".weight", gw);
          }
          push(op.input, std::move(gx));
          break;
        }
        case PrimKind::BatchNorm: {
          auto g = batchnorm_backward(gout, state_[ri].bn_ctx, params.get(op.id + ".gamma").value);
          params.accumulate_grad(op.id + ".gamma", g.gamma);
          params.accumulate_grad(op.id + ".beta", g.beta);
          push(op.input, std::move(g.input));
          break;
        }
        case PrimKind::Relu: push(op.input, relu_backward(gout, in)); break;
        case PrimKind::MaxPool:
          if (op.skip_in_low && mode == Mode::Low)
            push(op.input, std::move(gout));
          else
            push(op.input, maxpool2d_backward(gout, state_[ri].argmax, in.shape));
          break;
        case PrimKind::AvgPool:
          if (op.skip_in_low && mode == Mode::Low)
            push(op.input, std::move(gout));
          else
            push(op.input, avgpool2d_backward(gout, in.shape, op.pool));
          break;
        case PrimKind::GlobalAvgPool: push(op.input, global_avgpool_backward(gout, in.shape)); break;
        case PrimKind::Linear: {
          auto g = linear_backward(gout, in, params.get(op.id + ".weight").value);
          params.accumulate_grad(op.id + ".weight", g.weight);
          params.accumulate_grad(op.id + ".bias", g.bias);
          push(op.input, std::move(g.input));
          break;
        }
        case PrimKind::Add: {
          Tensor<T> copy = gout;
          push(op.skip, std::move(copy));
          push(op.input, std::move(gout));
          break;
        }
      }
    }
    have_cache_ = false;
    values_.clear();
  }

  // Batch-norm running statistics, exposed for checkpointing and tests.
  struct BnState {
    std::string op_id;
    Tensor<T>*mean_full, *var_full, *mean_low, *var_low;
  };
  std::vector<BnState> bn_states() {
    std::vector<BnState> out;
    for (size_t i = 0; i < prog_.ops.size(); ++i)
      if (prog_.ops[i].kind == PrimKind::BatchNorm)
        out.push_back({prog_.ops[i].id, &state_[i].running_mean_full, &state_[i].running_var_full,
                       &state_[i].running_mean_low, &state_[i].running_var_low});
    return out;
  }

 private:
  struct OpState {
    KernelBank<T> bank;
    Tensor<T> running_mean_full, running_var_full, running_mean_low, running_var_low;
    BatchNormCtx<T> bn_ctx;
    std::vector<int32_t> argmax;
  };

  void validate_input(const Tensor<T>& batch, Mode mode) const {
    if (batch.rank() != 4)
      throw ShapeError("network input must be NCHW, got " + shape_str(batch.shape));
    if (batch.dim(1) != prog_.input_channels)
      throw ShapeError("network input has " + std::to_string(batch.dim(1)) +
                       " channels, expected " + std::to_string(prog_.input_channels));
    const int expect =
        mode == Mode::Full ? prog_.input_size : prog_.input_size / transform_.ratio;
    if (batch.dim(2) != expect || batch.dim(3) != expect)
      throw ShapeError("input " + std::to_string(batch.dim(2)) + "x" +
                       std::to_string(batch.dim(3)) + " does not match " +
                       std::string(mode_name(mode)) + "-mode size " + std::to_string(expect));
  }

  const Tensor<T>& value_of(int idx) const {
    return idx < 0 ? input_ : values_[static_cast<size_t>(idx)];
  }

  const Tensor<T>& conv_weights(ParamStore<T>& params, size_t op_index, const PrimOp& op,
                                Mode mode) {
    Param<T>& p = params.get(op.id + ".weight");
    if (mode == Mode::Low && op.transformable) {
      KernelBank<T>& bank = state_[op_index].bank;
      if (!bank.installed())
        throw StateError("low-mode forward without transformed kernels for '" + op.id +
                         "' (call refresh_transformed first)");
      return bank.transformed;
    }
    return p.value;
  }

  Program prog_;
  TransformSpec transform_;
  std::vector<OpState> state_;
  std::vector<Tensor<T>> values_;
  Tensor<T> input_;
  bool have_cache_ = false;
  Mode cached_mode_ = Mode::Full;
};

// Builds the runtime graph + freshly initialized parameters for a spec.
template <typename T>
std::pair<Network<T>, ParamStore<T>> build_network(const NetworkSpec& spec, uint64_t seed,
                                                   TransformSpec transform = TransformSpec::defaults()) {
  Network<T> net(compile_network(spec), std::move(transform));
  ParamStore<T> params;
  net.init_params(params, seed);
  return {std::move(net), std::move(params)};
}

}  // namespace lowmode
