#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "slimconv/kernels.hpp"
#include "slimconv/params.hpp"
#include "slimconv/slimconv.hpp"

namespace slimconv {

enum class LayerKind {
  Input,
  Conv,
  BatchNorm,
  ReLU,
  Sigmoid,
  MaxPool,
  GlobalAvgPool,
  Linear,
  Add,
  MulChannelwise,
  ConcatChannels,
  FlipChannels,
  SplitSum,
  Output,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Linear: return "linear";
    case LayerKind::Add: return "add";
    case LayerKind::MulChannelwise: return "mul";
    case LayerKind::ConcatChannels: return "concat";
    case LayerKind::FlipChannels: return "flip";
    case LayerKind::SplitSum: return "splitsum";
    case LayerKind::Output: return "output";
  }
  return "unknown";
}

// Tags read by diagnostics.
enum class Role { None, SeWeights, BlockOutput };

struct LayerNode {
  std::size_t id = 0;
  std::string name;  // also the parameter prefix
  LayerKind kind = LayerKind::Input;
  std::vector<std::size_t> inputs;

  // Conv, Linear and MaxPool attributes.
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  bool bias = false;
  // SplitSum chunk count.
  std::size_t parts = 2;

  Shape out;  // per-sample shape, n = 1
  Role role = Role::None;
  int unit = -1;  // index into ModelGraph::units for nodes of a SlimConv unit
};

struct UnitInfo {
  std::string prefix;
  SlimConvConfig config;
  Shape input;  // per-sample input shape
  std::size_t weights_node = 0;
};

// Topologically ordered layer graph with per-sample shapes resolved at
// insertion. Node 0 is the single Input; the last node is the single Output.
class ModelGraph {
 public:
  std::string name;
  std::size_t classes = 0;
  bool executable = true;

  const std::vector<LayerNode>& nodes() const { return nodes_; }
  const LayerNode& node(std::size_t id) const { return nodes_.at(id); }
  const std::vector<UnitInfo>& units() const { return units_; }
  const Shape& input_shape() const { return nodes_.at(0).out; }
  const Shape& output_shape() const { return nodes_.back().out; }
  std::size_t size() const { return nodes_.size(); }

  std::size_t input(Shape per_sample) {
    if (!nodes_.empty()) throw ConfigError("graph: input must be the first node");
    LayerNode n;
    n.name = "input";
    n.kind = LayerKind::Input;
    n.out = Shape{1, per_sample.c, per_sample.h, per_sample.w};
    return push(std::move(n));
  }

  std::size_t conv(std::size_t x, const std::string& name, std::size_t out_ch, std::size_t kernel,
                   std::size_t stride = 1, std::size_t padding = 0, std::size_t groups = 1, bool bias = false) {
    LayerNode n = make(LayerKind::Conv, name, {x});
    n.in_channels = shape_of(x).c;
    n.out_channels = out_ch;
    n.kernel = kernel;
    n.stride = stride;
    n.padding = padding;
    n.groups = groups;
    n.bias = bias;
    check(groups > 0 && n.in_channels % groups == 0 && out_ch % groups == 0, n,
          "channels " + std::to_string(n.in_channels) + "->" + std::to_string(out_ch) + " not divisible by groups " +
              std::to_string(groups));
    const Shape& s = shape_of(x);
    try {
      n.out = Shape{1, out_ch, kernels::conv_out_extent(s.h, kernel, stride, padding),
                    kernels::conv_out_extent(s.w, kernel, stride, padding)};
    } catch (const ConfigError& e) {
      throw ConfigError("graph: node '" + name + "': " + e.what());
    }
    return push(std::move(n));
  }

  std::size_t batch_norm(std::size_t x, const std::string& name) {
    LayerNode n = make(LayerKind::BatchNorm, name, {x});
    n.in_channels = n.out_channels = shape_of(x).c;
    n.out = shape_of(x);
    return push(std::move(n));
  }

  std::size_t relu(std::size_t x, const std::string& name) { return unary(LayerKind::ReLU, x, name); }
  std::size_t sigmoid(std::size_t x, const std::string& name) { return unary(LayerKind::Sigmoid, x, name); }
  std::size_t flip(std::size_t x, const std::string& name) { return unary(LayerKind::FlipChannels, x, name); }

  std::size_t max_pool(std::size_t x, const std::string& name, std::size_t kernel, std::size_t stride,
                       std::size_t padding) {
    LayerNode n = make(LayerKind::MaxPool, name, {x});
    n.kernel = kernel;
    n.stride = stride;
    n.padding = padding;
    const Shape& s = shape_of(x);
    try {
      n.out = Shape{1, s.c, kernels::conv_out_extent(s.h, kernel, stride, padding),
                    kernels::conv_out_extent(s.w, kernel, stride, padding)};
    } catch (const ConfigError& e) {
      throw ConfigError("graph: node '" + name + "': " + e.what());
    }
    return push(std::move(n));
  }

  std::size_t global_avg_pool(std::size_t x, const std::string& name) {
    LayerNode n = make(LayerKind::GlobalAvgPool, name, {x});
    n.out = Shape{1, shape_of(x).c, 1, 1};
    return push(std::move(n));
  }

  std::size_t linear(std::size_t x, const std::string& name, std::size_t out_features) {
    LayerNode n = make(LayerKind::Linear, name, {x});
    const Shape& s = shape_of(x);
    check(s.h == 1 && s.w == 1, n, "input must be 1x1 spatially, got " + s.str());
    n.in_channels = s.c;
    n.out_channels = out_features;
    n.bias = true;
    n.out = Shape{1, out_features, 1, 1};
    return push(std::move(n));
  }

  std::size_t add(std::size_t a, std::size_t b, const std::string& name) {
    LayerNode n = make(LayerKind::Add, name, {a, b});
    check(shape_of(a) == shape_of(b), n, "operands " + shape_of(a).str() + " and " + shape_of(b).str());
    n.out = shape_of(a);
    return push(std::move(n));
  }

  std::size_t mul_channelwise(std::size_t x, std::size_t w, const std::string& name) {
    LayerNode n = make(LayerKind::MulChannelwise, name, {x, w});
    const Shape &sx = shape_of(x), &sw = shape_of(w);
    check(sw.c == sx.c && sw.h == 1 && sw.w == 1, n, "weights " + sw.str() + " do not match features " + sx.str());
    n.out = sx;
    return push(std::move(n));
  }

  std::size_t concat(std::size_t a, std::size_t b, const std::string& name) {
    LayerNode n = make(LayerKind::ConcatChannels, name, {a, b});
    const Shape &sa = shape_of(a), &sb = shape_of(b);
    check(sa.h == sb.h && sa.w == sb.w, n, "spatial sizes " + sa.str() + " and " + sb.str());
    n.out = Shape{1, sa.c + sb.c, sa.h, sa.w};
    return push(std::move(n));
  }

  std::size_t split_sum(std::size_t x, const std::string& name, std::size_t parts) {
    LayerNode n = make(LayerKind::SplitSum, name, {x});
    const Shape& s = shape_of(x);
    check(parts >= 2 && s.c >= parts && (parts != 2 || s.c % 2 == 0), n,
          "cannot fold C=" + std::to_string(s.c) + " into " + std::to_string(parts) + " parts");
    n.parts = parts;
    n.out = Shape{1, s.c / parts, s.h, s.w};
    return push(std::move(n));
  }

  std::size_t output(std::size_t x) {
    LayerNode n = make(LayerKind::Output, "output", {x});
    n.out = shape_of(x);
    return push(std::move(n));
  }

  void set_role(std::size_t id, Role r) { nodes_.at(id).role = r; }

  // Expands a SlimConv unit into primitive nodes named `prefix` + the unit's
  // tensor names, so a ParamStore filled for the graph also drives
  // slimconv_forward with the same prefix.
  std::size_t slimconv(std::size_t x, const std::string& prefix, const SlimConvConfig& cfg) {
    slimconv::validate(cfg);
    const Shape s = shape_of(x);
    if (s.c != cfg.channels) {
      throw ConfigError("graph: unit '" + prefix + "' expects C=" + std::to_string(cfg.channels) + ", got " +
                        std::to_string(s.c));
    }
    const auto p = pathway_widths(cfg);
    const int unit = static_cast<int>(units_.size());
    const std::size_t first = nodes_.size();
    const std::size_t gt = effective_groups(cfg.groups, p.c_in, p.c_top);
    const std::size_t gb = effective_groups(cfg.groups, p.c_bot, p.c_bot);

    std::size_t z = global_avg_pool(x, prefix + "se.gap");
    z = conv(z, prefix + "se.fc1", cfg.se.hidden(cfg.channels), 1);
    z = relu(batch_norm(z, prefix + "se.bn"), prefix + "se.relu");
    z = conv(z, prefix + "se.fc2", cfg.channels, 1, 1, 0, 1, true);
    const std::size_t w = sigmoid(z, prefix + "se.sigmoid");
    set_role(w, Role::SeWeights);

    std::size_t w_top = w, w_bot = w;
    if (cfg.flip_mode == FlipMode::FlipBottom) w_bot = flip(w, prefix + "flip");
    if (cfg.flip_mode == FlipMode::FlipBoth) w_top = w_bot = flip(w, prefix + "flip");

    std::size_t top = split_sum(mul_channelwise(x, w_top, prefix + "top.mul"), prefix + "top.splitsum", p.parts);
    top = conv(top, prefix + "top.conv3", p.c_top, 3, cfg.stride, 1, gt);
    top = relu(batch_norm(top, prefix + "top.bn"), prefix + "top.relu");

    std::size_t bot = split_sum(mul_channelwise(x, w_bot, prefix + "bottom.mul"), prefix + "bottom.splitsum", p.parts);
    bot = conv(bot, prefix + "bottom.conv1", p.c_bot, 1);
    bot = relu(batch_norm(bot, prefix + "bottom.bn1"), prefix + "bottom.relu1");
    bot = conv(bot, prefix + "bottom.conv3", p.c_bot, 3, cfg.stride, 1, gb);
    bot = relu(batch_norm(bot, prefix + "bottom.bn3"), prefix + "bottom.relu3");

    const std::size_t out = concat(top, bot, prefix + "concat");
    for (std::size_t i = first; i < nodes_.size(); ++i) nodes_[i].unit = unit;
    units_.push_back({prefix, cfg, s, w});
    return out;
  }

  // Structural checks beyond the ones done at insertion.
  void validate() const {
    if (nodes_.empty() || nodes_.front().kind != LayerKind::Input) throw ConfigError("graph: missing input node");
    if (nodes_.back().kind != LayerKind::Output) throw ConfigError("graph: missing output node");
    for (std::size_t i = 1; i < nodes_.size(); ++i) {
      if (nodes_[i].kind == LayerKind::Input) throw ConfigError("graph: more than one input node");
      if (nodes_[i].kind == LayerKind::Output && i + 1 != nodes_.size()) {
        throw ConfigError("graph: output node must be last");
      }
      for (std::size_t in : nodes_[i].inputs)
        if (in >= i) throw ConfigError("graph: node '" + nodes_[i].name + "' is not in topological order");
    }
  }

 private:
  const Shape& shape_of(std::size_t id) const {
    if (id >= nodes_.size()) throw ConfigError("graph: reference to unknown node " + std::to_string(id));
    return nodes_[id].out;
  }

  LayerNode make(LayerKind kind, const std::string& name, std::vector<std::size_t> inputs) const {
    if (nodes_.empty()) throw ConfigError("graph: add the input node first");
    for (std::size_t in : inputs) shape_of(in);
    LayerNode n;
    n.kind = kind;
    n.name = name;
    n.inputs = std::move(inputs);
    return n;
  }

  std::size_t unary(LayerKind kind, std::size_t x, const std::string& name) {
    LayerNode n = make(kind, name, {x});
    n.out = shape_of(x);
    return push(std::move(n));
  }

  static void check(bool ok, const LayerNode& n, const std::string& what) {
    if (!ok) throw ConfigError("graph: node '" + n.name + "' (" + to_string(n.kind) + "): " + what);
  }

  std::size_t push(LayerNode n) {
    if (nodes_.size() > 0 && nodes_.back().kind == LayerKind::Output) {
      throw ConfigError("graph: cannot add nodes after the output");
    }
    n.id = nodes_.size();
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
  }

  std::vector<LayerNode> nodes_;
  std::vector<UnitInfo> units_;
};

// Declares the tensors every Conv, BatchNorm and Linear node needs.
template <typename T>
void declare_params(const ModelGraph& g, ParamStore<T>& store) {
  for (const LayerNode& n : g.nodes()) {
    switch (n.kind) {
      case LayerKind::Conv:
        store.add(n.name + ".weight", Shape{n.out_channels, n.in_channels / n.groups, n.kernel, n.kernel},
                  Init::FanOutNormal);
        if (n.bias) store.add(n.name + ".bias", Shape{1, n.out_channels, 1, 1}, Init::Zeros);
        break;
      case LayerKind::BatchNorm:
        add_batch_norm_params(store, n.name + ".", n.out.c);
        break;
      case LayerKind::Linear:
        store.add(n.name + ".weight", Shape{n.out_channels, n.in_channels, 1, 1}, Init::SmallNormal);
        store.add(n.name + ".bias", Shape{1, n.out_channels, 1, 1}, Init::Zeros);
        break;
      default:
        break;
    }
  }
}

}  // namespace slimconv
