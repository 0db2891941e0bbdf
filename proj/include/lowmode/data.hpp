// Dataset ingestion and the paired full/low batch pipeline: channel
// normalization with train-set statistics, Gaussian-blur-and-decimate input
// downsampling (bilinear behind a flag), and epoch iterators whose shuffles
// are pure functions of (seed, epoch) so full and low batches stay aligned.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lowmode/cifar_io.hpp"
#include "lowmode/tensor.hpp"

namespace lowmode {

template <typename T>
struct Dataset {
  Tensor<T> images;  // [M, 3, H, W], normalized
  std::vector<int> labels;
  std::string split;
  int num_classes = kCifarClasses;

  int size() const { return images.dim(0); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
};

enum class DownsampleMethod { Gaussian, Bilinear };

struct DownsampleSpec {
  int ratio = 2;
  double sigma = 0.0;  // 0 -> ratio / 2 (anti-aliasing cutoff for decimation)
  int radius = 0;      // 0 -> ceil(2 * sigma)
  DownsampleMethod method = DownsampleMethod::Gaussian;

  double effective_sigma() const { return sigma > 0.0 ? sigma : ratio / 2.0; }
  int effective_radius() const {
    return radius > 0 ? radius : static_cast<int>(std::ceil(2.0 * effective_sigma()));
  }
  void validate(int h, int w) const {
    if (ratio < 2) throw ConfigError("downsampling ratio must be >= 2");
    if (h % ratio != 0 || w % ratio != 0)
      throw ConfigError("ratio " + std::to_string(ratio) + " must divide image size " +
                        std::to_string(h) + "x" + std::to_string(w));
  }
};

// Normalized 1-d Gaussian taps, length 2*radius+1.
inline std::vector<double> gaussian_taps(double sigma, int radius) {
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-(i * i) / (2.0 * sigma * sigma));
    k[static_cast<size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

namespace detail {

inline int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

// Separable blur of one plane followed by keeping every r-th row/column
// starting at index 0.
template <typename T>
void blur_decimate_plane(const T* src, int h, int w, const std::vector<double>& taps, int ratio,
                         T* dst) {
  const int radius = (static_cast<int>(taps.size()) - 1) / 2;
  std::vector<double> rows(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int t = -radius; t <= radius; ++t)
        s += taps[static_cast<size_t>(t + radius)] * src[y * w + reflect_index(x + t, w)];
      rows[static_cast<size_t>(y) * w + x] = s;
    }
  const int oh = h / ratio, ow = w / ratio;
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int t = -radius; t <= radius; ++t)
        s += taps[static_cast<size_t>(t + radius)] *
             rows[static_cast<size_t>(reflect_index(y * ratio + t, h)) * w + x * ratio];
      dst[y * ow + x] = static_cast<T>(s);
    }
}

template <typename T>
void bilinear_plane(const T* src, int h, int w, int ratio, T* dst) {
  const int oh = h / ratio, ow = w / ratio;
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const double sy = (y + 0.5) * ratio - 0.5, sx = (x + 0.5) * ratio - 0.5;
      const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, h - 1);
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, w - 1);
      const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = sy - y0, fx = sx - x0;
      const double v = (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
                       fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
      dst[y * ow + x] = static_cast<T>(v);
    }
}

}  // namespace detail

// [C,H,W] -> [C,H/r,W/r]
template <typename T>
Tensor<T> downsample_image(const Tensor<T>& img, const DownsampleSpec& spec) {
  if (img.rank() != 3) throw ShapeError("downsample_image expects [C,H,W]");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  spec.validate(h, w);
  Tensor<T> out({c, h / spec.ratio, w / spec.ratio});
  const auto taps = gaussian_taps(spec.effective_sigma(), spec.effective_radius());
  for (int ch = 0; ch < c; ++ch) {
    const T* src = img.ptr() + static_cast<int64_t>(ch) * h * w;
    T* dst = out.ptr() + static_cast<int64_t>(ch) * (h / spec.ratio) * (w / spec.ratio);
    if (spec.method == DownsampleMethod::Gaussian)
      detail::blur_decimate_plane(src, h, w, taps, spec.ratio, dst);
    else
      detail::bilinear_plane(src, h, w, spec.ratio, dst);
  }
  return out;
}

// [M,C,H,W] -> [M,C,H/r,W/r]; the host-side precomputation done once per run.
template <typename T>
Tensor<T> downsample_all(const Tensor<T>& images, const DownsampleSpec& spec) {
  const int m = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  spec.validate(h, w);
  const int oh = h / spec.ratio, ow = w / spec.ratio;
  Tensor<T> out({m, c, oh, ow});
  const auto taps = gaussian_taps(spec.effective_sigma(), spec.effective_radius());
  for (int i = 0; i < m; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T* src = images.ptr() + (static_cast<int64_t>(i) * c + ch) * h * w;
      T* dst = out.ptr() + (static_cast<int64_t>(i) * c + ch) * oh * ow;
      if (spec.method == DownsampleMethod::Gaussian)
        detail::blur_decimate_plane(src, h, w, taps, spec.ratio, dst);
      else
        detail::bilinear_plane(src, h, w, spec.ratio, dst);
    }
  return out;
}

struct ChannelStats {
  std::array<double, 3> mean{}, stddev{};
};

namespace detail {

inline ChannelStats channel_stats(const CifarRecords& rec) {
  ChannelStats st;
  const int64_t per_ch = static_cast<int64_t>(rec.count()) * 1024;
  for (int ch = 0; ch < 3; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < rec.count(); ++i) {
      const uint8_t* plane = rec.pixels.data() + static_cast<size_t>(i) * kCifarImageBytes +
                             static_cast<size_t>(ch) * 1024;
      for (int j = 0; j < 1024; ++j) {
        const double v = plane[j] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double mean = sum / static_cast<double>(per_ch);
    const double var = std::max(sq / static_cast<double>(per_ch) - mean * mean, 1e-12);
    st.mean[static_cast<size_t>(ch)] = mean;
    st.stddev[static_cast<size_t>(ch)] = std::sqrt(var);
  }
  return st;
}

template <typename T>
Dataset<T> to_dataset(const CifarRecords& rec, const ChannelStats& st, std::string split) {
  Dataset<T> d;
  d.split = std::move(split);
  d.images = Tensor<T>({rec.count(), 3, 32, 32});
  d.labels.assign(rec.labels.begin(), rec.labels.end());
  for (int i = 0; i < rec.count(); ++i)
    for (int ch = 0; ch < 3; ++ch) {
      const uint8_t* plane = rec.pixels.data() + static_cast<size_t>(i) * kCifarImageBytes +
                             static_cast<size_t>(ch) * 1024;
      T* dst = d.images.ptr() + ((static_cast<int64_t>(i) * 3 + ch) * 1024);
      const double mean = st.mean[static_cast<size_t>(ch)],
                   inv = 1.0 / st.stddev[static_cast<size_t>(ch)];
      for (int j = 0; j < 1024; ++j)
        dst[j] = static_cast<T>((plane[j] / 255.0 - mean) * inv);
    }
  return d;
}

// First k records of each class, in file order.
inline CifarRecords first_k_per_class(const CifarRecords& rec, int k) {
  CifarRecords out;
  std::array<int, kCifarClasses> taken{};
  for (int i = 0; i < rec.count(); ++i) {
    const int cls = rec.labels[static_cast<size_t>(i)];
    if (taken[static_cast<size_t>(cls)] >= k) continue;
    ++taken[static_cast<size_t>(cls)];
    out.labels.push_back(rec.labels[static_cast<size_t>(i)]);
    out.pixels.insert(out.pixels.end(),
                      rec.pixels.begin() + static_cast<int64_t>(i) * kCifarImageBytes,
                      rec.pixels.begin() + static_cast<int64_t>(i + 1) * kCifarImageBytes);
  }
  for (int c = 0; c < kCifarClasses; ++c)
    if (taken[static_cast<size_t>(c)] < k)
      throw DataError("class " + std::to_string(c) + " has only " +
                      std::to_string(taken[static_cast<size_t>(c)]) + " examples, need " +
                      std::to_string(k));
  return out;
}

}  // namespace detail

// Loads the standard binary batch files. subset_per_class / val_subset_per_class
// of 0 mean "all"; a positive k keeps the first k examples of each class.
// Normalization statistics always come from the (subset) training split.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> load_cifar10(const std::string& dir, int subset_per_class = 0,
                                               int val_subset_per_class = 0) {
  CifarRecords train;
  for (int f = 1; f <= 5; ++f) {
    CifarRecords part = read_cifar_file(dir + "/data_batch_" + std::to_string(f) + ".bin");
    train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
    train.pixels.insert(train.pixels.end(), part.pixels.begin(), part.pixels.end());
  }
  CifarRecords val = read_cifar_file(dir + "/test_batch.bin");
  if (subset_per_class > 0) train = detail::first_k_per_class(train, subset_per_class);
  if (val_subset_per_class > 0) val = detail::first_k_per_class(val, val_subset_per_class);
  const ChannelStats st = detail::channel_stats(train);
  return {detail::to_dataset<T>(train, st, "train"), detail::to_dataset<T>(val, st, "val")};
}

// In-memory synthetic splits (same image model as the CIFAR-format writer).
template <typename T>
std::pair<Dataset<T>, Dataset<T>> make_synthetic_dataset(int train_count, int val_count,
                                                         uint64_t seed) {
  CifarRecords train = make_synthetic_records(train_count, seed);
  CifarRecords val = make_synthetic_records(val_count, seed + 0x5EEDULL);
  const ChannelStats st = detail::channel_stats(train);
  return {detail::to_dataset<T>(train, st, "train"), detail::to_dataset<T>(val, st, "val")};
}

// A dataset together with its precomputed low-resolution copy.
template <typename T>
struct PairedDataset {
  Dataset<T> data;
  Tensor<T> low;  // [M, 3, H/r, W/r]
  DownsampleSpec spec;

  static PairedDataset make(Dataset<T> d, const DownsampleSpec& spec) {
    PairedDataset p;
    p.low = downsample_all(d.images, spec);
    p.data = std::move(d);
    p.spec = spec;
    return p;
  }
};

template <typename T>
struct BatchPair {
  Tensor<T> full;            // [B, 3, H, W]
  Tensor<T> low;             // [B, 3, H/r, W/r]
  std::vector<int> labels;
  int64_t iteration = 0;     // index within the epoch
};

inline std::vector<int> epoch_permutation(uint64_t seed, int epoch, int count) {
  std::vector<int> perm(static_cast<size_t>(count));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(epoch + 1)));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

// Yields index-aligned full/low batches; the tail that does not fill a batch
// is dropped. The permutation depends only on (seed, epoch).
template <typename T>
class EpochIterator {
 public:
  EpochIterator(const PairedDataset<T>& paired, int batch_size, uint64_t seed, int epoch)
      : paired_(paired),
        batch_(batch_size),
        perm_(epoch_permutation(seed, epoch, paired.data.size())) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  }

  int batches() const { return paired_.data.size() / batch_; }

  bool next(BatchPair<T>& out) {
    if (cursor_ >= batches()) return false;
    const int fh = paired_.data.height(), fw = paired_.data.width();
    const int lh = fh / paired_.spec.ratio, lw = fw / paired_.spec.ratio;
    out.full = Tensor<T>({batch_, 3, fh, fw});
    out.low = Tensor<T>({batch_, 3, lh, lw});
    out.labels.resize(static_cast<size_t>(batch_));
    for (int j = 0; j < batch_; ++j) {
      const int src = perm_[static_cast<size_t>(cursor_ * batch_ + j)];
      std::copy_n(paired_.data.images.ptr() + static_cast<int64_t>(src) * 3 * fh * fw,
                  static_cast<int64_t>(3) * fh * fw,
                  out.full.ptr() + static_cast<int64_t>(j) * 3 * fh * fw);
      std::copy_n(paired_.low.ptr() + static_cast<int64_t>(src) * 3 * lh * lw,
                  static_cast<int64_t>(3) * lh * lw,
                  out.low.ptr() + static_cast<int64_t>(j) * 3 * lh * lw);
      out.labels[static_cast<size_t>(j)] = paired_.data.labels[static_cast<size_t>(src)];
    }
    out.iteration = cursor_++;
    return true;
  }

 private:
  const PairedDataset<T>& paired_;
  int batch_;
  std::vector<int> perm_;
  int cursor_ = 0;
};

}  // namespace lowmode
