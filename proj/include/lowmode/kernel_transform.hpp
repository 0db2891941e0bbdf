// Differentiable kernel downsampling T(.): per-filter, per-channel average
// pooling that maps a [N,C,K,K] kernel bank to [N,C,Khat,Khat], plus the
// chain-rule step that routes transformed-kernel gradients back onto the
// original parameters.

#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "lowmode/ops.hpp"
#include "lowmode/tensor.hpp"

namespace lowmode {

enum class TransformRounding { Odd, Ceil, Floor };

struct TransformRule {
  int window = 1;
  int stride = 1;
  int pad_begin = 0;  // top/left
  int pad_end = 0;    // bottom/right (the asymmetric side)
  int out_k = 1;

  PoolGeometry pool() const { return PoolGeometry{window, stride, pad_begin, pad_end}; }
};

// Derive the pooling rule that shrinks a KxK kernel by ratio r.
//   Ceil:  window r, stride r, clipped bottom/right windows -> ceil(K/r)
//   Floor: window K-(out-1)*r, stride r, no padding         -> floor(K/r)
//   Odd:   whichever of the two yields an odd output size
inline TransformRule derive_transform_rule(int k, int ratio, TransformRounding rounding) {
  if (k < 2 || ratio < 2) throw ConfigError("kernel transform needs K >= 2 and ratio >= 2");
  const int ceil_k = (k + ratio - 1) / ratio;
  const int floor_k = k / ratio;
  int out;
  switch (rounding) {
    case TransformRounding::Ceil: out = ceil_k; break;
    case TransformRounding::Floor: out = floor_k; break;
    case TransformRounding::Odd: out = (ceil_k % 2 == 1) ? ceil_k : floor_k; break;
    default: out = ceil_k; break;
  }
  if (out < 1)
    throw ConfigError("transform of K=" + std::to_string(k) + " with ratio " +
                      std::to_string(ratio) + " would produce an empty kernel");
  TransformRule r;
  r.out_k = out;
  if (out == ceil_k) {
    r.window = ratio;
    r.stride = ratio;
    r.pad_begin = 0;
    r.pad_end = out * ratio - k;
  } else {
    r.window = k - (out - 1) * ratio;
    r.stride = ratio;
    r.pad_begin = 0;
    r.pad_end = 0;
  }
  return r;
}

struct TransformSpec {
  int ratio = 2;
  TransformRounding rounding = TransformRounding::Odd;
  std::map<int, TransformRule> rules;  // original K -> pooling rule

  // Paper-default rules: 3x3 -> 1x1 via a full 3x3 window, 5x5 -> 3x3 via a
  // 2x2/stride-2 window with one clipped bottom/right row and column.
  static TransformSpec defaults(int ratio = 2) {
    TransformSpec s;
    s.ratio = ratio;
    for (int k : {3, 5}) s.rules[k] = derive_transform_rule(k, ratio, TransformRounding::Odd);
    return s;
  }

  void add_rule(int k) { rules[k] = derive_transform_rule(k, ratio, rounding); }

  const TransformRule& rule_for(int k) const {
    auto it = rules.find(k);
    if (it == rules.end())
      throw ConfigError("no kernel transform rule for K=" + std::to_string(k) + " at ratio " +
                        std::to_string(ratio));
    return it->second;
  }
};

// Transform a kernel bank: average pooling over the two spatial dims, one
// (filter, channel) plane at a time. Valid-only divisors keep clipped
// windows from being diluted by implicit zeros.
template <typename T>
Tensor<T> transform_kernels(const Tensor<T>& original, const TransformRule& rule) {
  if (original.rank() != 4)
    throw ShapeError("transform_kernels expects [N,C,K,K], got " + shape_str(original.shape));
  return avgpool2d_forward(original, rule.pool());
}

// Eq-4 step: dL/dW = (dT/dW)^T dL/dWhat, which for average pooling is the
// pooling backward pass applied per filter/channel.
template <typename T>
Tensor<T> backprop_through_transform(const Tensor<T>& grad_transformed,
                                     const std::vector<int>& original_shape,
                                     const TransformRule& rule) {
  return avgpool2d_backward(grad_transformed, original_shape, rule.pool());
}

// Cached transformed kernels for one convolution layer. `refreshed_version`
// tracks the version counter of the original parameter tensor; any optimizer
// step bumps that counter, which marks the cache dirty.
template <typename T>
struct KernelBank {
  static constexpr uint64_t kNeverRefreshed = ~uint64_t{0};

  TransformRule rule;
  Tensor<T> transformed;
  uint64_t refreshed_version = kNeverRefreshed;

  bool dirty(uint64_t param_version) const { return refreshed_version != param_version; }

  void refresh_if_dirty(const Tensor<T>& original, uint64_t param_version) {
    if (!dirty(param_version)) return;
    transformed = transform_kernels(original, rule);
    refreshed_version = param_version;
  }

  bool installed() const { return refreshed_version != kNeverRefreshed; }
};

}  // namespace lowmode
