// CIFAR-10 binary batch files: 3073-byte records, one label byte followed by
// 3x1024 pixel bytes (R, G, B planes, row-major). Also hosts the synthetic
// record generator used for desk-scale experiments and loader tests.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lowmode {

struct CifarRecords {
  std::vector<uint8_t> labels;
  std::vector<uint8_t> pixels;  // count * 3072, planar RGB
  int count() const { return static_cast<int>(labels.size()); }
};

constexpr int kCifarImageBytes = 3 * 32 * 32;
constexpr int kCifarRecordBytes = 1 + kCifarImageBytes;
constexpr int kCifarClasses = 10;

// Throws IoError naming the file when missing or truncated (record size must
// divide the file length) and DataError on out-of-range label bytes.
CifarRecords read_cifar_file(const std::string& path);

void write_cifar_file(const std::string& path, const CifarRecords& records);

// Class-conditional synthetic images in CIFAR layout: smooth low-frequency
// pattern per (class, channel) plus per-sample jitter and pixel noise, so
// the task stays learnable after 2x downsampling. Labels cycle 0..9.
CifarRecords make_synthetic_records(int count, uint64_t seed, double noise_stddev = 28.0);

// Writes data_batch_1..5.bin and test_batch.bin with `per_file` records each.
void write_synthetic_cifar_dir(const std::string& dir, int per_file, uint64_t seed);

}  // namespace lowmode
