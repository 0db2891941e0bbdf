// Network descriptions: layer specs (including residual blocks), named
// presets, and the compiled flat program of primitive ops that both the
// runtime graph and the cost analyzer execute. Pure geometry, no scalars.

#pragma once

#include <string>
#include <vector>

#include "lowmode/kernel_transform.hpp"
#include "lowmode/ops.hpp"

namespace lowmode {

enum class Mode { Full, Low };

inline const char* mode_name(Mode m) { return m == Mode::Full ? "full" : "low"; }

enum class LayerKind {
  Conv,
  BatchNorm,
  Relu,
  MaxPool,
  AvgPool,
  GlobalAvgPool,
  Linear,
  ResidualBasic,
  ResidualBottleneck,
};

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  std::string name;

  // conv / residual blocks
  int in_ch = 0, out_ch = 0, mid_ch = 0;
  int kernel = 0, stride = 1, pad = 0;
  bool transformable = false;

  // pooling
  int window = 0, pool_stride = 1, pool_pad_begin = 0, pool_pad_end = 0;
  bool skip_in_low = false;  // stem pool dropped in low mode

  // linear
  int in_features = 0, out_features = 0;

  static LayerSpec conv(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad,
                        bool transformable);
  static LayerSpec batchnorm(std::string name, int channels);
  static LayerSpec relu(std::string name);
  static LayerSpec maxpool(std::string name, int window, int stride, int pad, bool skip_in_low);
  static LayerSpec avgpool(std::string name, int window, int stride, int pad);
  static LayerSpec global_avgpool(std::string name);
  static LayerSpec linear(std::string name, int in_features, int out_features);
  static LayerSpec residual_basic(std::string name, int in_ch, int out_ch, int stride,
                                  bool transformable);
  static LayerSpec residual_bottleneck(std::string name, int in_ch, int mid_ch, int out_ch,
                                       int stride, bool transformable_mid);
};

struct NetworkSpec {
  std::string name;
  int num_classes = 10;
  int input_channels = 3;
  int input_size = 32;  // expected full-mode H = W
  std::vector<LayerSpec> layers;
};

// Presets used by the CLI and the experiments. `width_div` shrinks every
// channel count (for test-scale gradient checks); 1 is the real model.
NetworkSpec make_preset(const std::string& id, int num_classes = 10, int width_div = 1,
                        int input_size = 32);
std::vector<std::string> preset_names();

// ---- compiled program ------------------------------------------------

enum class PrimKind { Conv, BatchNorm, Relu, MaxPool, AvgPool, GlobalAvgPool, Linear, Add };

const char* prim_kind_name(PrimKind k);

struct PrimOp {
  PrimKind kind;
  std::string id;
  int input = -1;  // producing op index; -1 = network input
  int skip = -1;   // second operand of Add
  bool transformable = false;
  bool skip_in_low = false;
  ConvGeometry conv;
  PoolGeometry pool;
  int channels = 0;                      // BatchNorm
  int in_features = 0, out_features = 0;  // Linear
};

struct Program {
  std::string name;
  int num_classes = 0;
  int input_channels = 3;
  int input_size = 32;
  std::vector<PrimOp> ops;
};

// Flattens residual blocks into primitive ops and validates channel chaining.
// Throws ConfigError naming the first inconsistent layer.
Program compile_network(const NetworkSpec& spec);

// Effective convolution geometry of one op in a given mode: transformable
// convs in low mode use the pooled kernel size with same-style padding.
ConvGeometry effective_conv_geometry(const PrimOp& op, Mode mode, const TransformSpec& transform);

struct OpShape {
  int C = 0, H = 0, W = 0;
  bool flat = false;  // [N, C] tensor (after global pooling / linear)
};

// Static shape propagation for one mode. Throws GeometryError/ConfigError on
// the first op whose input does not fit.
std::vector<OpShape> walk_shapes(const Program& prog, int in_c, int in_h, int in_w, Mode mode,
                                 const TransformSpec& transform);

}  // namespace lowmode
