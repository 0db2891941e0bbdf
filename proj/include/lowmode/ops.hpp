// Elementary numeric kernels: convolution (im2col + GEMM), pooling,
// linear, batch norm, softmax cross-entropy, and their backward passes.
//
// All functions are pure value-in/value-out and single threaded; identical
// inputs give bit-identical outputs. Convolution is cross-correlation
// (no kernel flip), the usual deep-learning convention.

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <utility>

#include "lowmode/tensor.hpp"

namespace lowmode {

struct ConvGeometry {
  int kernel = 1;
  int stride = 1;
  int pad_begin = 0;  // top / left
  int pad_end = 0;    // bottom / right
  int in_ch = 1;
  int out_ch = 1;

  int out_size(int in) const {
    if (stride < 1) throw GeometryError("conv stride must be >= 1");
    int out = (in + pad_begin + pad_end - kernel) / stride + 1;
    if (out < 1)
      throw GeometryError("conv output size < 1 for input " + std::to_string(in) + ", kernel " +
                          std::to_string(kernel) + ", stride " + std::to_string(stride));
    return out;
  }
};

struct PoolGeometry {
  int window = 1;
  int stride = 1;
  int pad_begin = 0;  // top / left
  int pad_end = 0;    // bottom / right

  int out_size(int in) const {
    if (window > in + pad_begin + pad_end)
      throw GeometryError("pool window " + std::to_string(window) +
                          " exceeds padded input extent " +
                          std::to_string(in + pad_begin + pad_end));
    int out = (in + pad_begin + pad_end - window) / stride + 1;
    if (out < 1) throw GeometryError("pool output size < 1");
    return out;
  }
};

// Multiply-accumulate instrumentation. Ops add their executed counts when
// enabled; the cost analyzer must reproduce these numbers exactly from
// static geometry.
struct CostCounter {
  bool enabled = false;
  int64_t conv_macs = 0;
  int64_t linear_macs = 0;
  int64_t bn_macs = 0;
  int64_t pool_macs = 0;
  int64_t gap_macs = 0;

  void reset() { conv_macs = linear_macs = bn_macs = pool_macs = gap_macs = 0; }
  int64_t total() const { return conv_macs + linear_macs + bn_macs + pool_macs + gap_macs; }
};

inline CostCounter g_cost_counter;

namespace detail {

// Scatter an NCHW image into [K*K*C, Hout*Wout] columns. Out-of-bounds
// (padded) cells become zero.
template <typename T>
void im2col(const T* x, int C, int H, int W, const ConvGeometry& g, int Hout, int Wout, T* col) {
  const int HW = Hout * Wout;
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < g.kernel; ++kh) {
      for (int kw = 0; kw < g.kernel; ++kw) {
        T* row = col + (static_cast<int64_t>((c * g.kernel + kh) * g.kernel + kw)) * HW;
        for (int oh = 0; oh < Hout; ++oh) {
          const int ih = oh * g.stride - g.pad_begin + kh;
          if (ih < 0 || ih >= H) {
            std::fill(row + oh * Wout, row + (oh + 1) * Wout, T(0));
            continue;
          }
          const T* src = x + (static_cast<int64_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wout; ++ow) {
            const int iw = ow * g.stride - g.pad_begin + kw;
            row[oh * Wout + ow] = (iw < 0 || iw >= W) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, const ConvGeometry& g, int Hout, int Wout,
                T* x) {
  const int HW = Hout * Wout;
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < g.kernel; ++kh) {
      for (int kw = 0; kw < g.kernel; ++kw) {
        const T* row = col + (static_cast<int64_t>((c * g.kernel + kh) * g.kernel + kw)) * HW;
        for (int oh = 0; oh < Hout; ++oh) {
          const int ih = oh * g.stride - g.pad_begin + kh;
          if (ih < 0 || ih >= H) continue;
          T* dst = x + (static_cast<int64_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wout; ++ow) {
            const int iw = ow * g.stride - g.pad_begin + kw;
            if (iw >= 0 && iw < W) dst[iw] += row[oh * Wout + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernels,
                         const ConvGeometry& geom) {
  if (input.rank() != 4)
    throw ShapeError("conv2d: input must be NCHW, got " + shape_str(input.shape));
  if (input.dim(1) != geom.in_ch)
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) +
                     " channels, geometry expects " + std::to_string(geom.in_ch));
  if (kernels.shape != std::vector<int>{geom.out_ch, geom.in_ch, geom.kernel, geom.kernel})
    throw ShapeError("conv2d: kernel tensor " + shape_str(kernels.shape) +
                     " does not match geometry [" + std::to_string(geom.out_ch) + "x" +
                     std::to_string(geom.in_ch) + "x" + std::to_string(geom.kernel) + "x" +
                     std::to_string(geom.kernel) + "]");
  const int N = input.dim(0), C = geom.in_ch, H = input.dim(2), W = input.dim(3);
  const int Hout = geom.out_size(H), Wout = geom.out_size(W);
  const int KKC = geom.kernel * geom.kernel * C;
  const int HW = Hout * Wout;

  Tensor<T> out({N, geom.out_ch, Hout, Wout});
  std::vector<T> col(static_cast<size_t>(KKC) * HW);
  for (int n = 0; n < N; ++n) {
    detail::im2col(input.ptr() + static_cast<int64_t>(n) * C * H * W, C, H, W, geom, Hout, Wout,
                   col.data());
    T* y = out.ptr() + static_cast<int64_t>(n) * geom.out_ch * HW;
    const T* wmat = kernels.ptr();
    for (int i = 0; i < geom.out_ch; ++i) {
      T* yrow = y + static_cast<int64_t>(i) * HW;
      for (int k = 0; k < KKC; ++k) {
        const T a = wmat[static_cast<int64_t>(i) * KKC + k];
        const T* crow = col.data() + static_cast<int64_t>(k) * HW;
        for (int j = 0; j < HW; ++j) yrow[j] += a * crow[j];
      }
    }
  }
  if (g_cost_counter.enabled)
    g_cost_counter.conv_macs +=
        static_cast<int64_t>(N) * geom.out_ch * KKC * HW;
  debug_check_finite(out, "conv2d_forward");
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> conv2d_backward(const Tensor<T>& upstream, const Tensor<T>& input,
                                                const Tensor<T>& kernels,
                                                const ConvGeometry& geom) {
  const int N = input.dim(0), C = geom.in_ch, H = input.dim(2), W = input.dim(3);
  const int Hout = geom.out_size(H), Wout = geom.out_size(W);
  if (upstream.shape != std::vector<int>{N, geom.out_ch, Hout, Wout})
    throw ShapeError("conv2d_backward: upstream " + shape_str(upstream.shape) +
                     " does not match forward output [" + std::to_string(N) + "x" +
                     std::to_string(geom.out_ch) + "x" + std::to_string(Hout) + "x" +
                     std::to_string(Wout) + "]");
  const int KKC = geom.kernel * geom.kernel * C;
  const int HW = Hout * Wout;

  Tensor<T> grad_input({N, C, H, W});
  Tensor<T> grad_kernels({geom.out_ch, C, geom.kernel, geom.kernel});
  std::vector<T> col(static_cast<size_t>(KKC) * HW);
  std::vector<T> dcol(static_cast<size_t>(KKC) * HW);
  const T* wmat = kernels.ptr();
  for (int n = 0; n < N; ++n) {
    const T* x = input.ptr() + static_cast<int64_t>(n) * C * H * W;
    const T* gy = upstream.ptr() + static_cast<int64_t>(n) * geom.out_ch * HW;
    detail::im2col(x, C, H, W, geom, Hout, Wout, col.data());

    // dW[i,k] += sum_j gy[i,j] * col[k,j]
    T* gw = grad_kernels.ptr();
    for (int i = 0; i < geom.out_ch; ++i) {
      const T* gyrow = gy + static_cast<int64_t>(i) * HW;
      for (int k = 0; k < KKC; ++k) {
        const T* crow = col.data() + static_cast<int64_t>(k) * HW;
        T s = 0;
        for (int j = 0; j < HW; ++j) s += gyrow[j] * crow[j];
        gw[static_cast<int64_t>(i) * KKC + k] += s;
      }
    }

    // dcol[k,j] = sum_i W[i,k] * gy[i,j], then scatter back to the image.
    std::fill(dcol.begin(), dcol.end(), T(0));
    for (int i = 0; i < geom.out_ch; ++i) {
      const T* gyrow = gy + static_cast<int64_t>(i) * HW;
      for (int k = 0; k < KKC; ++k) {
        const T a = wmat[static_cast<int64_t>(i) * KKC + k];
        T* drow = dcol.data() + static_cast<int64_t>(k) * HW;
        for (int j = 0; j < HW; ++j) drow[j] += a * gyrow[j];
      }
    }
    detail::col2im_add(dcol.data(), C, H, W, geom, Hout, Wout,
                       grad_input.ptr() + static_cast<int64_t>(n) * C * H * W);
  }
  debug_check_finite(grad_input, "conv2d_backward");
  debug_check_finite(grad_kernels, "conv2d_backward");
  return {std::move(grad_input), std::move(grad_kernels)};
}

// Average pooling with valid-only divisors: each output is the mean over the
// window cells that fall inside the unpadded input, so asymmetric padding
// never dilutes edges with implicit zeros.
template <typename T>
Tensor<T> avgpool2d_forward(const Tensor<T>& input, const PoolGeometry& g) {
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Hout = g.out_size(H), Wout = g.out_size(W);
  Tensor<T> out({N, C, Hout, Wout});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oh = 0; oh < Hout; ++oh) {
        const int h0 = std::max(oh * g.stride - g.pad_begin, 0);
        const int h1 = std::min(oh * g.stride - g.pad_begin + g.window, H);
        for (int ow = 0; ow < Wout; ++ow) {
          const int w0 = std::max(ow * g.stride - g.pad_begin, 0);
          const int w1 = std::min(ow * g.stride - g.pad_begin + g.window, W);
          const int cnt = (h1 - h0) * (w1 - w0);
          if (cnt <= 0) throw GeometryError("avgpool window fully outside input");
          T s = 0;
          for (int h = h0; h < h1; ++h)
            for (int w = w0; w < w1; ++w) s += input.at(n, c, h, w);
          out.at(n, c, oh, ow) = s / static_cast<T>(cnt);
        }
      }
    }
  }
  if (g_cost_counter.enabled)
    g_cost_counter.pool_macs +=
        static_cast<int64_t>(N) * C * Hout * Wout * g.window * g.window;
  debug_check_finite(out, "avgpool2d_forward");
  return out;
}

template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& upstream, const std::vector<int>& input_shape,
                             const PoolGeometry& g) {
  const int N = input_shape[0], C = input_shape[1], H = input_shape[2], W = input_shape[3];
  const int Hout = g.out_size(H), Wout = g.out_size(W);
  if (upstream.shape != std::vector<int>{N, C, Hout, Wout})
    throw ShapeError("avgpool2d_backward: upstream " + shape_str(upstream.shape) +
                     " does not match pooled shape");
  Tensor<T> grad(input_shape);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oh = 0; oh < Hout; ++oh) {
        const int h0 = std::max(oh * g.stride - g.pad_begin, 0);
        const int h1 = std::min(oh * g.stride - g.pad_begin + g.window, H);
        for (int ow = 0; ow < Wout; ++ow) {
          const int w0 = std::max(ow * g.stride - g.pad_begin, 0);
          const int w1 = std::min(ow * g.stride - g.pad_begin + g.window, W);
          const T share = upstream.at(n, c, oh, ow) / static_cast<T>((h1 - h0) * (w1 - w0));
          for (int h = h0; h < h1; ++h)
            for (int w = w0; w < w1; ++w) grad.at(n, c, h, w) += share;
        }
      }
    }
  }
  debug_check_finite(grad, "avgpool2d_backward");
  return grad;
}

template <typename T>
struct MaxPoolResult {
  Tensor<T> output;
  std::vector<int32_t> argmax;  // flat h*W+w index into the input plane, per output cell
};

template <typename T>
MaxPoolResult<T> maxpool2d_forward(const Tensor<T>& input, const PoolGeometry& g) {
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Hout = g.out_size(H), Wout = g.out_size(W);
  MaxPoolResult<T> res{Tensor<T>({N, C, Hout, Wout}), {}};
  res.argmax.resize(res.output.data.size());
  int64_t o = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int oh = 0; oh < Hout; ++oh) {
        const int h0 = std::max(oh * g.stride - g.pad_begin, 0);
        const int h1 = std::min(oh * g.stride - g.pad_begin + g.window, H);
        for (int ow = 0; ow < Wout; ++ow, ++o) {
          const int w0 = std::max(ow * g.stride - g.pad_begin, 0);
          const int w1 = std::min(ow * g.stride - g.pad_begin + g.window, W);
          if (h1 <= h0 || w1 <= w0) throw GeometryError("maxpool window fully outside input");
          T best = -std::numeric_limits<T>::infinity();
          int32_t arg = 0;
          for (int h = h0; h < h1; ++h)
            for (int w = w0; w < w1; ++w)
              if (input.at(n, c, h, w) > best) {
                best = input.at(n, c, h, w);
                arg = static_cast<int32_t>(h * W + w);
              }
          res.output.data[o] = best;
          res.argmax[o] = arg;
        }
      }
    }
  }
  if (g_cost_counter.enabled)
    g_cost_counter.pool_macs +=
        static_cast<int64_t>(N) * C * Hout * Wout * g.window * g.window;
  return res;
}

template <typename T>
Tensor<T> maxpool2d_backward(const Tensor<T>& upstream, const std::vector<int32_t>& argmax,
                             const std::vector<int>& input_shape) {
  Tensor<T> grad(input_shape);
  const int C = input_shape[1], H = input_shape[2], W = input_shape[3];
  const int64_t plane = static_cast<int64_t>(H) * W;
  const int64_t per_n = static_cast<int64_t>(C) * plane;
  const int64_t out_per_nc = upstream.numel() / (static_cast<int64_t>(upstream.dim(0)) * C);
  int64_t o = 0;
  for (int n = 0; n < upstream.dim(0); ++n)
    for (int c = 0; c < C; ++c)
      for (int64_t j = 0; j < out_per_nc; ++j, ++o)
        grad.data[n * per_n + c * plane + argmax[o]] += upstream.data[o];
  return grad;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.data) v = v > T(0) ? v : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& upstream, const Tensor<T>& x) {
  if (!upstream.same_shape(x)) throw ShapeError("relu_backward: shape mismatch");
  Tensor<T> g = upstream;
  for (int64_t i = 0; i < g.numel(); ++i)
    if (x.data[i] <= T(0)) g.data[i] = T(0);
  return g;
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const int N = x.dim(0), F = x.dim(1), O = weight.dim(0);
  if (weight.dim(1) != F)
    throw ShapeError("linear: input features " + std::to_string(F) + " vs weight " +
                     shape_str(weight.shape));
  Tensor<T> y({N, O});
  for (int n = 0; n < N; ++n) {
    const T* xr = x.ptr() + static_cast<int64_t>(n) * F;
    for (int o = 0; o < O; ++o) {
      const T* wr = weight.ptr() + static_cast<int64_t>(o) * F;
      T s = bias.data[o];
      for (int f = 0; f < F; ++f) s += xr[f] * wr[f];
      y.at(n, o) = s;
    }
  }
  if (g_cost_counter.enabled) g_cost_counter.linear_macs += static_cast<int64_t>(N) * F * O;
  debug_check_finite(y, "linear_forward");
  return y;
}

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& upstream, const Tensor<T>& x,
                               const Tensor<T>& weight) {
  const int N = x.dim(0), F = x.dim(1), O = weight.dim(0);
  if (upstream.shape != std::vector<int>{N, O}) throw ShapeError("linear_backward: shape mismatch");
  LinearGrads<T> g{Tensor<T>({N, F}), Tensor<T>({O, F}), Tensor<T>({O})};
  for (int n = 0; n < N; ++n) {
    const T* gy = upstream.ptr() + static_cast<int64_t>(n) * O;
    const T* xr = x.ptr() + static_cast<int64_t>(n) * F;
    T* gx = g.input.ptr() + static_cast<int64_t>(n) * F;
    for (int o = 0; o < O; ++o) {
      const T a = gy[o];
      const T* wr = weight.ptr() + static_cast<int64_t>(o) * F;
      T* gw = g.weight.ptr() + static_cast<int64_t>(o) * F;
      for (int f = 0; f < F; ++f) {
        gx[f] += a * wr[f];
        gw[f] += a * xr[f];
      }
      g.bias.data[o] += a;
    }
  }
  return g;
}

template <typename T>
Tensor<T> global_avgpool_forward(const Tensor<T>& x) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({N, C});
  const T inv = T(1) / static_cast<T>(H * W);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x.ptr() + ((static_cast<int64_t>(n) * C + c) * H) * W;
      T s = 0;
      for (int i = 0; i < H * W; ++i) s += p[i];
      y.at(n, c) = s * inv;
    }
  if (g_cost_counter.enabled) g_cost_counter.gap_macs += static_cast<int64_t>(N) * C * H * W;
  return y;
}

template <typename T>
Tensor<T> global_avgpool_backward(const Tensor<T>& upstream, const std::vector<int>& input_shape) {
  const int N = input_shape[0], C = input_shape[1], H = input_shape[2], W = input_shape[3];
  if (upstream.shape != std::vector<int>{N, C})
    throw ShapeError("global_avgpool_backward: shape mismatch");
  Tensor<T> g(input_shape);
  const T inv = T(1) / static_cast<T>(H * W);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T share = upstream.at(n, c) * inv;
      T* p = g.ptr() + ((static_cast<int64_t>(n) * C + c) * H) * W;
      for (int i = 0; i < H * W; ++i) p[i] = share;
    }
  return g;
}

template <typename T>
struct BatchNormCtx {
  Tensor<T> xhat;            // normalized input, cached for backward
  std::vector<T> inv_std;    // per channel
};

// Per-channel batch normalization over (N, H, W). In training mode the batch
// statistics are used and `running_*` are updated in place with the usual
// exponential moving average; in eval mode `running_*` are read only.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                            Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                            BatchNormCtx<T>* ctx, T momentum = T(0.1), T eps = T(1e-5)) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C)
    throw ShapeError("batchnorm: gamma/beta must have one entry per channel");
  const int64_t M = static_cast<int64_t>(N) * H * W;
  const int64_t plane = static_cast<int64_t>(H) * W;
  Tensor<T> y({N, C, H, W});
  if (ctx) {
    ctx->xhat = Tensor<T>({N, C, H, W});
    ctx->inv_std.assign(C, T(0));
  }
  for (int c = 0; c < C; ++c) {
    T mean, var;
    if (training) {
      T s = 0;
      for (int n = 0; n < N; ++n) {
        const T* p = x.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) s += p[i];
      }
      mean = s / static_cast<T>(M);
      T v = 0;
      for (int n = 0; n < N; ++n) {
        const T* p = x.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const T d = p[i] - mean;
          v += d * d;
        }
      }
      var = v / static_cast<T>(M);
      running_mean.data[c] = (T(1) - momentum) * running_mean.data[c] + momentum * mean;
      running_var.data[c] = (T(1) - momentum) * running_var.data[c] + momentum * var;
    } else {
      mean = running_mean.data[c];
      var = running_var.data[c];
    }
    const T inv_std = T(1) / std::sqrt(var + eps);
    if (ctx) ctx->inv_std[c] = inv_std;
    const T gc = gamma.data[c], bc = beta.data[c];
    for (int n = 0; n < N; ++n) {
      const T* p = x.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
      T* q = y.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
      T* xh = ctx ? ctx->xhat.ptr() + (static_cast<int64_t>(n) * C + c) * plane : nullptr;
      for (int64_t i = 0; i < plane; ++i) {
        const T h = (p[i] - mean) * inv_std;
        if (xh) xh[i] = h;
        q[i] = gc * h + bc;
      }
    }
  }
  if (g_cost_counter.enabled) g_cost_counter.bn_macs += 2 * static_cast<int64_t>(N) * C * plane;
  debug_check_finite(y, "batchnorm_forward");
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& upstream, const BatchNormCtx<T>& ctx,
                                     const Tensor<T>& gamma) {
  const int N = upstream.dim(0), C = upstream.dim(1), H = upstream.dim(2), W = upstream.dim(3);
  if (!upstream.same_shape(ctx.xhat)) throw ShapeError("batchnorm_backward: shape mismatch");
  const int64_t M = static_cast<int64_t>(N) * H * W;
  const int64_t plane = static_cast<int64_t>(H) * W;
  BatchNormGrads<T> g{Tensor<T>(upstream.shape), Tensor<T>({C}), Tensor<T>({C})};
  for (int c = 0; c < C; ++c) {
    T sum_gy = 0, sum_gy_xhat = 0;
    for (int n = 0; n < N; ++n) {
      const T* gy = upstream.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
      const T* xh = ctx.xhat.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        sum_gy += gy[i];
        sum_gy_xhat += gy[i] * xh[i];
      }
    }
    g.gamma.data[c] = sum_gy_xhat;
    g.beta.data[c] = sum_gy;
    const T k = gamma.data[c] * ctx.inv_std[c] / static_cast<T>(M);
    for (int n = 0; n < N; ++n) {
      const T* gy = upstream.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
      const T* xh = ctx.xhat.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
      T* gx = g.input.ptr() + (static_cast<int64_t>(n) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i)
        gx[i] = k * (static_cast<T>(M) * gy[i] - sum_gy - xh[i] * sum_gy_xhat);
    }
  }
  return g;
}

// Mean softmax cross-entropy over the batch; returns the loss and the
// gradient with respect to the logits.
template <typename T>
std::pair<T, Tensor<T>> softmax_cross_entropy(const Tensor<T>& logits,
                                              const std::vector<int>& labels) {
  const int N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw ShapeError("softmax_cross_entropy: batch size " + std::to_string(N) + " vs " +
                     std::to_string(labels.size()) + " labels");
  Tensor<T> grad({N, K});
  T loss = 0;
  for (int n = 0; n < N; ++n) {
    if (labels[n] < 0 || labels[n] >= K)
      throw DataError("label " + std::to_string(labels[n]) + " out of class range [0," +
                      std::to_string(K) + ")");
    const T* row = logits.ptr() + static_cast<int64_t>(n) * K;
    T mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    const T logz = std::log(z) + mx;
    loss += logz - row[labels[n]];
    T* gr = grad.ptr() + static_cast<int64_t>(n) * K;
    for (int k = 0; k < K; ++k) gr[k] = std::exp(row[k] - logz) / static_cast<T>(N);
    gr[labels[n]] -= T(1) / static_cast<T>(N);
  }
  loss /= static_cast<T>(N);
  return {loss, std::move(grad)};
}

}  // namespace lowmode
