#include "lowmode/netspec.hpp"

#include <stdexcept>

namespace lowmode {

LayerSpec LayerSpec::conv(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad,
                          bool transformable) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.name = std::move(name);
  l.in_ch = in_ch;
  l.out_ch = out_ch;
  l.kernel = kernel;
  l.stride = stride;
  l.pad = pad;
  l.transformable = transformable;
  return l;
}

LayerSpec LayerSpec::batchnorm(std::string name, int channels) {
  LayerSpec l;
  l.kind = LayerKind::BatchNorm;
  l.name = std::move(name);
  l.in_ch = l.out_ch = channels;
  return l;
}

LayerSpec LayerSpec::relu(std::string name) {
  LayerSpec l;
  l.kind = LayerKind::Relu;
  l.name = std::move(name);
  return l;
}

LayerSpec LayerSpec::maxpool(std::string name, int window, int stride, int pad, bool skip_in_low) {
  LayerSpec l;
  l.kind = LayerKind::MaxPool;
  l.name = std::move(name);
  l.window = window;
  l.pool_stride = stride;
  l.pool_pad_begin = l.pool_pad_end = pad;
  l.skip_in_low = skip_in_low;
  return l;
}

LayerSpec LayerSpec::avgpool(std::string name, int window, int stride, int pad) {
  LayerSpec l;
  l.kind = LayerKind::AvgPool;
  l.name = std::move(name);
  l.window = window;
  l.pool_stride = stride;
  l.pool_pad_begin = l.pool_pad_end = pad;
  return l;
}

LayerSpec LayerSpec::global_avgpool(std::string name) {
  LayerSpec l;
  l.kind = LayerKind::GlobalAvgPool;
  l.name = std::move(name);
  return l;
}

LayerSpec LayerSpec::linear(std::string name, int in_features, int out_features) {
  LayerSpec l;
  l.kind = LayerKind::Linear;
  l.name = std::move(name);
  l.in_features = in_features;
  l.out_features = out_features;
  return l;
}

LayerSpec LayerSpec::residual_basic(std::string name, int in_ch, int out_ch, int stride,
                                    bool transformable) {
  LayerSpec l;
  l.kind = LayerKind::ResidualBasic;
  l.name = std::move(name);
  l.in_ch = in_ch;
  l.out_ch = out_ch;
  l.stride = stride;
  l.kernel = 3;
  l.pad = 1;
  l.transformable = transformable;
  return l;
}

LayerSpec LayerSpec::residual_bottleneck(std::string name, int in_ch, int mid_ch, int out_ch,
                                         int stride, bool transformable_mid) {
  LayerSpec l;
  l.kind = LayerKind::ResidualBottleneck;
  l.name = std::move(name);
  l.in_ch = in_ch;
  l.mid_ch = mid_ch;
  l.out_ch = out_ch;
  l.stride = stride;
  l.kernel = 3;
  l.pad = 1;
  l.transformable = transformable_mid;
  return l;
}

const char* prim_kind_name(PrimKind k) {
  switch (k) {
    case PrimKind::Conv: return "conv";
    case PrimKind::BatchNorm: return "batchnorm";
    case PrimKind::Relu: return "relu";
    case PrimKind::MaxPool: return "maxpool";
    case PrimKind::AvgPool: return "avgpool";
    case PrimKind::GlobalAvgPool: return "global_avgpool";
    case PrimKind::Linear: return "linear";
    case PrimKind::Add: return "add";
  }
  return "?";
}

namespace {

int div_width(int ch, int width_div) {
  int w = ch / width_div;
  return w < 1 ? 1 : w;
}

NetworkSpec tiny_cnn(int num_classes, int width_div, int input_size) {
  const int c1 = div_width(8, width_div), c2 = div_width(16, width_div);
  NetworkSpec s;
  s.name = "tiny-cnn";
  s.num_classes = num_classes;
  s.input_size = input_size;
  s.layers = {
      LayerSpec::conv("conv1", 3, c1, 3, 1, 1, true),
      LayerSpec::relu("relu1"),
      LayerSpec::maxpool("pool1", 2, 2, 0, true),
      LayerSpec::conv("conv2", c1, c2, 3, 1, 1, true),
      LayerSpec::relu("relu2"),
      LayerSpec::global_avgpool("gap"),
      LayerSpec::linear("fc", c2, num_classes),
  };
  return s;
}

void append_basic_stage(NetworkSpec& s, const std::string& name, int blocks, int in_ch, int out_ch,
                        int stride) {
  for (int b = 0; b < blocks; ++b)
    s.layers.push_back(LayerSpec::residual_basic(name + ".b" + std::to_string(b),
                                                 b == 0 ? in_ch : out_ch, out_ch,
                                                 b == 0 ? stride : 1, true));
}

void append_bottleneck_stage(NetworkSpec& s, const std::string& name, int blocks, int in_ch,
                             int mid_ch, int out_ch, int stride) {
  for (int b = 0; b < blocks; ++b)
    s.layers.push_back(LayerSpec::residual_bottleneck(name + ".b" + std::to_string(b),
                                                      b == 0 ? in_ch : out_ch, mid_ch, out_ch,
                                                      b == 0 ? stride : 1, true));
}

NetworkSpec resnet_tiny(int num_classes, int width_div, int input_size) {
  const int w = div_width(8, width_div);
  NetworkSpec s;
  s.name = "resnet8-tiny";
  s.num_classes = num_classes;
  s.input_size = input_size;
  s.layers = {
      LayerSpec::conv("stem.conv", 3, w, 3, 1, 1, false),
      LayerSpec::batchnorm("stem.bn", w),
      LayerSpec::relu("stem.relu"),
      LayerSpec::maxpool("stem.pool", 3, 2, 1, true),
  };
  append_basic_stage(s, "s1", 1, w, w, 1);
  append_basic_stage(s, "s2", 1, w, 2 * w, 2);
  append_basic_stage(s, "s3", 1, 2 * w, 4 * w, 2);
  s.layers.push_back(LayerSpec::global_avgpool("gap"));
  s.layers.push_back(LayerSpec::linear("fc", 4 * w, num_classes));
  return s;
}

NetworkSpec resnet18_cifar(int num_classes, int width_div, int input_size) {
  const int w = div_width(64, width_div);
  NetworkSpec s;
  s.name = "resnet18-cifar";
  s.num_classes = num_classes;
  s.input_size = input_size;
  s.layers = {
      LayerSpec::conv("stem.conv", 3, w, 3, 1, 1, false),
      LayerSpec::batchnorm("stem.bn", w),
      LayerSpec::relu("stem.relu"),
      LayerSpec::maxpool("stem.pool", 3, 2, 1, true),
  };
  append_basic_stage(s, "s1", 2, w, w, 1);
  append_basic_stage(s, "s2", 2, w, 2 * w, 2);
  append_basic_stage(s, "s3", 2, 2 * w, 4 * w, 2);
  append_basic_stage(s, "s4", 2, 4 * w, 8 * w, 2);
  s.layers.push_back(LayerSpec::global_avgpool("gap"));
  s.layers.push_back(LayerSpec::linear("fc", 8 * w, num_classes));
  return s;
}

NetworkSpec resnet50_cifar(int num_classes, int width_div, int input_size) {
  const int w = div_width(64, width_div);
  NetworkSpec s;
  s.name = "resnet50-cifar";
  s.num_classes = num_classes;
  s.input_size = input_size;
  s.layers = {
      LayerSpec::conv("stem.conv", 3, w, 3, 1, 1, false),
      LayerSpec::batchnorm("stem.bn", w),
      LayerSpec::relu("stem.relu"),
      LayerSpec::maxpool("stem.pool", 3, 2, 1, true),
  };
  append_bottleneck_stage(s, "s1", 3, w, w, 4 * w, 1);
  append_bottleneck_stage(s, "s2", 4, 4 * w, 2 * w, 8 * w, 2);
  append_bottleneck_stage(s, "s3", 6, 8 * w, 4 * w, 16 * w, 2);
  append_bottleneck_stage(s, "s4", 3, 16 * w, 8 * w, 32 * w, 2);
  s.layers.push_back(LayerSpec::global_avgpool("gap"));
  s.layers.push_back(LayerSpec::linear("fc", 32 * w, num_classes));
  return s;
}

}  // namespace

NetworkSpec make_preset(const std::string& id, int num_classes, int width_div, int input_size) {
  if (id == "tiny-cnn") return tiny_cnn(num_classes, width_div, input_size);
  if (id == "resnet8-tiny") return resnet_tiny(num_classes, width_div, input_size);
  if (id == "resnet18-cifar") return resnet18_cifar(num_classes, width_div, input_size);
  if (id == "resnet50-cifar") return resnet50_cifar(num_classes, width_div, input_size);
  throw ConfigError("unknown preset '" + id + "'");
}

std::vector<std::string> preset_names() {
  return {"tiny-cnn", "resnet8-tiny", "resnet18-cifar", "resnet50-cifar"};
}

namespace {

struct Compiler {
  Program prog;
  int last = -1;  // index of most recent op output

  int emit(PrimOp op) {
    prog.ops.push_back(std::move(op));
    last = static_cast<int>(prog.ops.size()) - 1;
    return last;
  }

  int conv(const std::string& id, int input, int in_ch, int out_ch, int k, int stride, int pad,
           bool transformable) {
    if (transformable && k < 2)
      throw ConfigError("layer " + id + ": transformable requires kernel size >= 2");
    PrimOp op;
    op.kind = PrimKind::Conv;
    op.id = id;
    op.input = input;
    op.conv = ConvGeometry{k, stride, pad, pad, in_ch, out_ch};
    op.transformable = transformable;
    return emit(op);
  }

  int bn(const std::string& id, int input, int channels) {
    PrimOp op;
    op.kind = PrimKind::BatchNorm;
    op.id = id;
    op.input = input;
    op.channels = channels;
    return emit(op);
  }

  int relu(const std::string& id, int input) {
    PrimOp op;
    op.kind = PrimKind::Relu;
    op.id = id;
    op.input = input;
    return emit(op);
  }

  int add(const std::string& id, int a, int b) {
    PrimOp op;
    op.kind = PrimKind::Add;
    op.id = id;
    op.input = a;
    op.skip = b;
    return emit(op);
  }

  void basic_block(const LayerSpec& l) {
    const int block_in = last;
    int x = conv(l.name + ".conv1", block_in, l.in_ch, l.out_ch, 3, l.stride, 1, l.transformable);
    x = bn(l.name + ".bn1", x, l.out_ch);
    x = relu(l.name + ".relu1", x);
    x = conv(l.name + ".conv2", x, l.out_ch, l.out_ch, 3, 1, 1, l.transformable);
    x = bn(l.name + ".bn2", x, l.out_ch);
    int shortcut = block_in;
    if (l.stride != 1 || l.in_ch != l.out_ch) {
      shortcut = conv(l.name + ".proj", block_in, l.in_ch, l.out_ch, 1, l.stride, 0, false);
      shortcut = bn(l.name + ".proj_bn", shortcut, l.out_ch);
    }
    x = add(l.name + ".add", x, shortcut);
    relu(l.name + ".relu2", x);
  }

  void bottleneck_block(const LayerSpec& l) {
    const int block_in = last;
    int x = conv(l.name + ".conv1", block_in, l.in_ch, l.mid_ch, 1, 1, 0, false);
    x = bn(l.name + ".bn1", x, l.mid_ch);
    x = relu(l.name + ".relu1", x);
    x = conv(l.name + ".conv2", x, l.mid_ch, l.mid_ch, 3, l.stride, 1, l.transformable);
    x = bn(l.name + ".bn2", x, l.mid_ch);
    x = relu(l.name + ".relu2", x);
    x = conv(l.name + ".conv3", x, l.mid_ch, l.out_ch, 1, 1, 0, false);
    x = bn(l.name + ".bn3", x, l.out_ch);
    int shortcut = block_in;
    if (l.stride != 1 || l.in_ch != l.out_ch) {
      shortcut = conv(l.name + ".proj", block_in, l.in_ch, l.out_ch, 1, l.stride, 0, false);
      shortcut = bn(l.name + ".proj_bn", shortcut, l.out_ch);
    }
    x = add(l.name + ".add", x, shortcut);
    relu(l.name + ".relu3", x);
  }
};

}  // namespace

Program compile_network(const NetworkSpec& spec) {
  Compiler c;
  c.prog.name = spec.name;
  c.prog.num_classes = spec.num_classes;
  c.prog.input_channels = spec.input_channels;
  c.prog.input_size = spec.input_size;
  for (const LayerSpec& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        c.conv(l.name, c.last, l.in_ch, l.out_ch, l.kernel, l.stride, l.pad, l.transformable);
        break;
      case LayerKind::BatchNorm: c.bn(l.name, c.last, l.in_ch); break;
      case LayerKind::Relu: c.relu(l.name, c.last); break;
      case LayerKind::MaxPool: {
        PrimOp op;
        op.kind = PrimKind::MaxPool;
        op.id = l.name;
        op.input = c.last;
        op.pool = PoolGeometry{l.window, l.pool_stride, l.pool_pad_begin, l.pool_pad_end};
        op.skip_in_low = l.skip_in_low;
        c.emit(op);
        break;
      }
      case LayerKind::AvgPool: {
        PrimOp op;
        op.kind = PrimKind::AvgPool;
        op.id = l.name;
        op.input = c.last;
        op.pool = PoolGeometry{l.window, l.pool_stride, l.pool_pad_begin, l.pool_pad_end};
        c.emit(op);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        PrimOp op;
        op.kind = PrimKind::GlobalAvgPool;
        op.id = l.name;
        op.input = c.last;
        c.emit(op);
        break;
      }
      case LayerKind::Linear: {
        PrimOp op;
        op.kind = PrimKind::Linear;
        op.id = l.name;
        op.input = c.last;
        op.in_features = l.in_features;
        op.out_features = l.out_features;
        c.emit(op);
        break;
      }
      case LayerKind::ResidualBasic: c.basic_block(l); break;
      case LayerKind::ResidualBottleneck: c.bottleneck_block(l); break;
    }
  }
  // channel chaining is validated by a full-mode shape walk at nominal size
  walk_shapes(c.prog, spec.input_channels, spec.input_size, spec.input_size, Mode::Full,
              TransformSpec::defaults());
  return c.prog;
}

ConvGeometry effective_conv_geometry(const PrimOp& op, Mode mode, const TransformSpec& transform) {
  if (op.kind != PrimKind::Conv) throw StateError("effective_conv_geometry on non-conv op");
  ConvGeometry g = op.conv;
  if (mode == Mode::Low && op.transformable) {
    const TransformRule& rule = transform.rule_for(g.kernel);
    const int khat = rule.out_k;
    int pad;
    if (g.pad_begin == 0 && g.pad_end == 0) {
      pad = 0;
    } else if (g.pad_begin == g.kernel / 2 && g.pad_end == g.kernel / 2) {
      pad = khat / 2;  // same-style padding carries over
    } else {
      throw ConfigError("layer " + op.id + ": transformable conv needs zero or K/2 padding");
    }
    g.kernel = khat;
    g.pad_begin = g.pad_end = pad;
  }
  return g;
}

std::vector<OpShape> walk_shapes(const Program& prog, int in_c, int in_h, int in_w, Mode mode,
                                 const TransformSpec& transform) {
  std::vector<OpShape> shapes(prog.ops.size());
  auto input_of = [&](int idx) -> OpShape {
    if (idx < 0) return OpShape{in_c, in_h, in_w, false};
    return shapes[static_cast<size_t>(idx)];
  };
  for (size_t i = 0; i < prog.ops.size(); ++i) {
    const PrimOp& op = prog.ops[i];
    const OpShape in = input_of(op.input);
    OpShape out = in;
    try {
      switch (op.kind) {
        case PrimKind::Conv: {
          if (in.flat) throw ShapeError("conv input is flat");
          const ConvGeometry g = effective_conv_geometry(op, mode, transform);
          if (in.C != g.in_ch)
            throw ShapeError("expects " + std::to_string(g.in_ch) + " channels, got " +
                             std::to_string(in.C));
          out = {g.out_ch, g.out_size(in.H), g.out_size(in.W), false};
          break;
        }
        case PrimKind::BatchNorm:
          if (in.C != op.channels)
            throw ShapeError("expects " + std::to_string(op.channels) + " channels, got " +
                             std::to_string(in.C));
          break;
        case PrimKind::Relu: break;
        case PrimKind::MaxPool:
        case PrimKind::AvgPool:
          if (op.skip_in_low && mode == Mode::Low) break;  // dropped after the stem
          out.H = op.pool.out_size(in.H);
          out.W = op.pool.out_size(in.W);
          break;
        case PrimKind::GlobalAvgPool:
          if (in.flat) throw ShapeError("global_avgpool input is flat");
          out = {in.C, 1, 1, true};
          break;
        case PrimKind::Linear:
          if (!in.flat) throw ShapeError("linear input must be flat (use global_avgpool)");
          if (in.C != op.in_features)
            throw ShapeError("expects " + std::to_string(op.in_features) + " features, got " +
                             std::to_string(in.C));
          out = {op.out_features, 1, 1, true};
          break;
        case PrimKind::Add: {
          const OpShape s = input_of(op.skip);
          if (s.C != in.C || s.H != in.H || s.W != in.W || s.flat != in.flat)
            throw ShapeError("operand shapes differ");
          break;
        }
      }
    } catch (const std::exception& e) {
      throw ConfigError("layer " + op.id + " (" + mode_name(mode) + " mode): " + e.what());
    }
    shapes[i] = out;
  }
  return shapes;
}

}  // namespace lowmode
