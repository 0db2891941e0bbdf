// Self-describing binary checkpoints: a sequence of named tensors
// (name, dtype, shape, raw little-endian data). Holds parameter values,
// momentum buffers, both modes' batch-norm statistics, the epoch counter,
// and the metrics history, so a resumed run continues bit-identically.

#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lowmode/metrics.hpp"
#include "lowmode/network.hpp"
#include "lowmode/tensor.hpp"

namespace lowmode {

namespace ckpt_detail {

constexpr uint32_t kMagic = 0x4C4D434B;  // "LMCK"
constexpr uint32_t kVersion = 1;

enum class DType : uint8_t { F32 = 0, F64 = 1, I64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else if constexpr (std::is_same_v<T, double>) return DType::F64;
  else return DType::I64;
}

template <typename S>
void write_pod(std::ofstream& out, const S& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(S));
}

template <typename S>
S read_pod(std::ifstream& in) {
  S v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(S));
  return v;
}

template <typename T>
void write_entry(std::ofstream& out, const std::string& name, const Tensor<T>& t) {
  write_pod<uint16_t>(out, static_cast<uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<uint8_t>(out, static_cast<uint8_t>(dtype_of<T>()));
  write_pod<uint8_t>(out, static_cast<uint8_t>(t.shape.size()));
  for (int d : t.shape) write_pod<uint32_t>(out, static_cast<uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(T)));
}

}  // namespace ckpt_detail

template <typename T>
struct CheckpointMeta {
  int epoch = 0;
  uint64_t seed = 0;
  std::vector<MetricsRecord> history;
};

template <typename T>
void save_checkpoint(const std::string& path, Network<T>& net, const ParamStore<T>& params,
                     const CheckpointMeta<T>& meta) {
  using namespace ckpt_detail;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create checkpoint '" + path + "'");

  std::vector<std::pair<std::string, const Tensor<T>*>> entries;
  for (const auto& name : params.names()) {
    entries.push_back({"param/" + name, &params.get(name).value});
    entries.push_back({"momentum/" + name, &params.get(name).momentum});
  }
  auto bns = net.bn_states();
  for (auto& bn : bns) {
    entries.push_back({"bn/" + bn.op_id + "/mean_full", bn.mean_full});
    entries.push_back({"bn/" + bn.op_id + "/var_full", bn.var_full});
    entries.push_back({"bn/" + bn.op_id + "/mean_low", bn.mean_low});
    entries.push_back({"bn/" + bn.op_id + "/var_low", bn.var_low});
  }

  Tensor<int64_t> meta_t({2}, {meta.epoch, static_cast<int64_t>(meta.seed)});
  Tensor<double> hist({std::max<int>(1, static_cast<int>(meta.history.size())), 8});
  for (size_t i = 0; i < meta.history.size(); ++i) {
    const MetricsRecord& r = meta.history[i];
    double* row = hist.ptr() + i * 8;
    row[0] = r.epoch;
    row[1] = r.wall_time_s;
    row[2] = r.train_loss;
    row[3] = r.val_accuracy;
    row[4] = static_cast<double>(r.low_iters);
    row[5] = static_cast<double>(r.full_iters);
    row[6] = static_cast<double>(r.cum_macs);
    row[7] = r.velocity;
  }

  const uint32_t count = static_cast<uint32_t>(entries.size()) + 3;
  write_pod(out, kMagic);
  write_pod(out, kVersion);
  write_pod(out, count);
  for (auto& [name, tensor] : entries) write_entry(out, name, *tensor);
  write_entry(out, "meta/state", meta_t);
  Tensor<int64_t> hist_len({1}, {static_cast<int64_t>(meta.history.size())});
  write_entry(out, "meta/history_len", hist_len);
  // history rows ride along as a trailing f64 tensor
  write_pod<uint16_t>(out, 12);
  out.write("meta/history", 12);
  write_pod<uint8_t>(out, static_cast<uint8_t>(DType::F64));
  write_pod<uint8_t>(out, 2);
  write_pod<uint32_t>(out, static_cast<uint32_t>(hist.dim(0)));
  write_pod<uint32_t>(out, static_cast<uint32_t>(hist.dim(1)));
  out.write(reinterpret_cast<const char*>(hist.data.data()),
            static_cast<std::streamsize>(hist.data.size() * sizeof(double)));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

template <typename T>
CheckpointMeta<T> load_checkpoint(const std::string& path, Network<T>& net,
                                  ParamStore<T>& params) {
  using namespace ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  if (read_pod<uint32_t>(in) != kMagic) throw IoError("'" + path + "' is not a checkpoint file");
  if (read_pod<uint32_t>(in) != kVersion) throw IoError("unsupported checkpoint version");
  const uint32_t count = read_pod<uint32_t>(in);

  CheckpointMeta<T> meta;
  auto bns = net.bn_states();
  std::vector<double> hist_rows;
  int64_t hist_len = 0;

  for (uint32_t i = 0; i < count && in; ++i) {
    const uint16_t name_len = read_pod<uint16_t>(in);
    if (!in) throw IoError("checkpoint '" + path + "' is truncated");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const DType dtype = static_cast<DType>(read_pod<uint8_t>(in));
    const uint8_t rank = read_pod<uint8_t>(in);
    std::vector<int> shape(rank);
    int64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(read_pod<uint32_t>(in));
      numel *= d;
    }
    auto read_into = [&](auto* dst, size_t bytes) {
      in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    };
    if (name.rfind("param/", 0) == 0 || name.rfind("momentum/", 0) == 0) {
      if (dtype != dtype_of<T>())
        throw IoError("checkpoint scalar type does not match this run's precision");
      const bool is_param = name[0] == 'p';
      const std::string pname = name.substr(is_param ? 6 : 9);
      Param<T>& p = params.get(pname);
      Tensor<T>& dst = is_param ? p.value : p.momentum;
      if (dst.shape != shape)
        throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                      ", expected " + shape_str(dst.shape));
      read_into(dst.data.data(), dst.data.size() * sizeof(T));
      if (is_param) ++p.version;  // loaded values invalidate transformed caches
    } else if (name.rfind("bn/", 0) == 0) {
      if (dtype != dtype_of<T>()) throw IoError("checkpoint scalar type mismatch");
      bool matched = false;
      for (auto& bn : bns) {
        const std::string base = "bn/" + bn.op_id + "/";
        Tensor<T>* dst = nullptr;
        if (name == base + "mean_full") dst = bn.mean_full;
        else if (name == base + "var_full") dst = bn.var_full;
        else if (name == base + "mean_low") dst = bn.mean_low;
        else if (name == base + "var_low") dst = bn.var_low;
        if (dst) {
          read_into(dst->data.data(), dst->data.size() * sizeof(T));
          matched = true;
          break;
        }
      }
      if (!matched) throw IoError("checkpoint entry '" + name + "' matches no batch-norm layer");
    } else if (name == "meta/state") {
      int64_t vals[2];
      read_into(vals, sizeof(vals));
      meta.epoch = static_cast<int>(vals[0]);
      meta.seed = static_cast<uint64_t>(vals[1]);
    } else if (name == "meta/history_len") {
      read_into(&hist_len, sizeof(hist_len));
    } else if (name == "meta/history") {
      hist_rows.resize(static_cast<size_t>(numel));
      read_into(hist_rows.data(), hist_rows.size() * sizeof(double));
    } else {
      throw IoError("unknown checkpoint entry '" + name + "'");
    }
  }
  for (int64_t i = 0; i < hist_len; ++i) {
    const double* row = hist_rows.data() + i * 8;
    MetricsRecord r;
    r.epoch = static_cast<int>(row[0]);
    r.wall_time_s = row[1];
    r.train_loss = row[2];
    r.val_accuracy = row[3];
    r.low_iters = static_cast<int64_t>(row[4]);
    r.full_iters = static_cast<int64_t>(row[5]);
    r.cum_macs = static_cast<int64_t>(row[6]);
    r.velocity = row[7];
    meta.history.push_back(r);
  }
  return meta;
}

}  // namespace lowmode
