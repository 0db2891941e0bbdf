#include "lowmode/cifar_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "lowmode/tensor.hpp"

namespace lowmode {

CifarRecords read_cifar_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open CIFAR batch file '" + path + "'");
  const auto size = static_cast<int64_t>(in.tellg());
  if (size <= 0 || size % kCifarRecordBytes != 0)
    throw IoError("CIFAR batch file '" + path + "' is truncated: " + std::to_string(size) +
                  " bytes is not a multiple of " + std::to_string(kCifarRecordBytes));
  in.seekg(0);
  const int count = static_cast<int>(size / kCifarRecordBytes);
  CifarRecords rec;
  rec.labels.resize(static_cast<size_t>(count));
  rec.pixels.resize(static_cast<size_t>(count) * kCifarImageBytes);
  for (int i = 0; i < count; ++i) {
    uint8_t label;
    in.read(reinterpret_cast<char*>(&label), 1);
    in.read(reinterpret_cast<char*>(rec.pixels.data() + static_cast<size_t>(i) * kCifarImageBytes),
            kCifarImageBytes);
    if (!in) throw IoError("short read in CIFAR batch file '" + path + "'");
    if (label >= kCifarClasses)
      throw DataError("label byte " + std::to_string(int(label)) + " out of range in '" + path +
                      "' (record " + std::to_string(i) + ")");
    rec.labels[static_cast<size_t>(i)] = label;
  }
  return rec;
}

void write_cifar_file(const std::string& path, const CifarRecords& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create '" + path + "'");
  for (int i = 0; i < records.count(); ++i) {
    out.put(static_cast<char>(records.labels[static_cast<size_t>(i)]));
    out.write(
        reinterpret_cast<const char*>(records.pixels.data() + static_cast<size_t>(i) * kCifarImageBytes),
        kCifarImageBytes);
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

namespace {

struct ClassPattern {
  // one low-frequency separable wave per channel
  double fy[3], fx[3], phase_y[3], phase_x[3], amp[3];
};

ClassPattern class_pattern(int cls) {
  std::mt19937_64 rng(0xC1FA5ULL * (cls + 1));
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_int_distribution<int> freq(1, 2);
  std::uniform_real_distribution<double> amp(45.0, 70.0);
  ClassPattern p;
  for (int ch = 0; ch < 3; ++ch) {
    p.fy[ch] = freq(rng);
    p.fx[ch] = freq(rng);
    p.phase_y[ch] = phase(rng);
    p.phase_x[ch] = phase(rng);
    p.amp[ch] = amp(rng);
  }
  return p;
}

}  // namespace

CifarRecords make_synthetic_records(int count, uint64_t seed, double noise_stddev) {
  static const std::vector<ClassPattern> patterns = [] {
    std::vector<ClassPattern> v;
    for (int c = 0; c < kCifarClasses; ++c) v.push_back(class_pattern(c));
    return v;
  }();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, noise_stddev);
  std::uniform_real_distribution<double> shift(-18.0, 18.0);
  std::uniform_real_distribution<double> gain(0.85, 1.15);

  CifarRecords rec;
  rec.labels.resize(static_cast<size_t>(count));
  rec.pixels.resize(static_cast<size_t>(count) * kCifarImageBytes);
  constexpr double tau = 2.0 * std::numbers::pi;
  for (int i = 0; i < count; ++i) {
    const int cls = i % kCifarClasses;
    rec.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(cls);
    const ClassPattern& p = patterns[static_cast<size_t>(cls)];
    const double s = shift(rng), g = gain(rng);
    uint8_t* img = rec.pixels.data() + static_cast<size_t>(i) * kCifarImageBytes;
    for (int ch = 0; ch < 3; ++ch) {
      for (int y = 0; y < 32; ++y) {
        const double wy = std::sin(tau * p.fy[ch] * y / 32.0 + p.phase_y[ch]);
        for (int x = 0; x < 32; ++x) {
          const double wx = std::cos(tau * p.fx[ch] * x / 32.0 + p.phase_x[ch]);
          const double v = 127.0 + g * p.amp[ch] * wy * wx + s + noise(rng);
          img[ch * 1024 + y * 32 + x] =
              static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
        }
      }
    }
  }
  return rec;
}

void write_synthetic_cifar_dir(const std::string& dir, int per_file, uint64_t seed) {
  std::filesystem::create_directories(dir);
  for (int f = 0; f < 5; ++f)
    write_cifar_file(dir + "/data_batch_" + std::to_string(f + 1) + ".bin",
                     make_synthetic_records(per_file, seed + static_cast<uint64_t>(f)));
  write_cifar_file(dir + "/test_batch.bin", make_synthetic_records(per_file, seed + 1000));
}

}  // namespace lowmode
