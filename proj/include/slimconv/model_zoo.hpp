#pragma once

#include <cstdint>
#include <string>

#include "slimconv/graph.hpp"
#include "slimconv/model_spec.hpp"

namespace slimconv {

struct BottleneckOptions {
  Variant variant = Variant::Plain;
  SlimConvConfig slim;  // channels and stride are filled in per block
  std::size_t groups = 1;
  std::size_t se_reduction = 0;  // > 0 adds an SE block before the residual add
};

// 1x1 reduce -> 3x3 (or SlimConv) -> 1x1 expand, with an identity or
// projection shortcut. Returns the id of the block's final ReLU.
inline std::size_t build_bottleneck(ModelGraph& g, std::size_t x, const std::string& prefix, std::size_t width,
                                    std::size_t out_ch, std::size_t stride, const BottleneckOptions& opt) {
  const std::size_t in_ch = g.node(x).out.c;
  std::size_t y = g.conv(x, prefix + "conv1", width, 1);
  y = g.relu(g.batch_norm(y, prefix + "bn1"), prefix + "relu1");
  if (opt.variant == Variant::Slim) {
    SlimConvConfig cfg = opt.slim;
    cfg.channels = width;
    cfg.stride = stride;
    y = g.slimconv(y, prefix + "slim.", cfg);
  } else {
    y = g.conv(y, prefix + "conv2", width, 3, stride, 1, opt.groups);
    y = g.relu(g.batch_norm(y, prefix + "bn2"), prefix + "relu2");
  }
  y = g.batch_norm(g.conv(y, prefix + "conv3", out_ch, 1), prefix + "bn3");
  if (opt.se_reduction > 0) {
    std::size_t s = g.global_avg_pool(y, prefix + "se.gap");
    s = g.relu(g.conv(s, prefix + "se.fc1", out_ch / opt.se_reduction, 1, 1, 0, 1, true), prefix + "se.relu");
    s = g.sigmoid(g.conv(s, prefix + "se.fc2", out_ch, 1, 1, 0, 1, true), prefix + "se.sigmoid");
    y = g.mul_channelwise(y, s, prefix + "se.mul");
  }
  std::size_t shortcut = x;
  if (stride != 1 || in_ch != out_ch) {
    shortcut = g.batch_norm(g.conv(x, prefix + "downsample.conv", out_ch, 1, stride), prefix + "downsample.bn");
  }
  const std::size_t out = g.relu(g.add(y, shortcut, prefix + "add"), prefix + "relu3");
  g.set_role(out, Role::BlockOutput);
  return out;
}

inline std::size_t build_stem(ModelGraph& g, std::size_t x, const ModelSpec& s) {
  std::size_t y;
  switch (s.stem) {
    case Stem::ImageNet:
      y = g.relu(g.batch_norm(g.conv(x, "stem.conv", s.stem_width, 7, 2, 3), "stem.bn"), "stem.relu");
      return g.max_pool(y, "stem.pool", 3, 2, 1);
    case Stem::Cifar:
      return g.relu(g.batch_norm(g.conv(x, "stem.conv", s.stem_width, 3, 1, 1), "stem.bn"), "stem.relu");
    case Stem::CifarPooled:
      y = g.relu(g.batch_norm(g.conv(x, "stem.conv", s.stem_width, 3, 1, 1), "stem.bn"), "stem.relu");
      return g.max_pool(y, "stem.pool", 2, 2, 0);
  }
  throw ConfigError("model spec: unknown stem");
}

// Stem, bottleneck stages (stride 2 at the start of every stage but the
// first), global average pooling and a linear classifier.
inline ModelGraph build_graph(const ModelSpec& s) {
  const auto blocks = s.stage_blocks();
  const auto widths = s.stage_widths();
  const auto outs = s.stage_outputs();
  if (s.classes == 0) throw ConfigError("model spec: classes must be positive");

  ModelGraph g;
  g.name = s.name;
  g.classes = s.classes;
  g.executable = s.executable();
  std::size_t x = build_stem(g, g.input(s.input), s);

  BottleneckOptions opt;
  opt.variant = s.variant;
  opt.groups = s.family == Family::ResNeXt ? s.cardinality : 1;
  opt.se_reduction = s.family == Family::SeResNet ? s.se_reduction : 0;
  for (std::size_t st = 0; st < blocks.size(); ++st) {
    for (std::size_t b = 0; b < blocks[st]; ++b) {
      const std::size_t stride = (b == 0 && st > 0) ? 2 : 1;
      opt.slim = s.unit_config(widths[st], stride);
      const std::string prefix = "layer" + std::to_string(st + 1) + "." + std::to_string(b) + ".";
      x = build_bottleneck(g, x, prefix, widths[st], outs[st], stride, opt);
    }
  }
  x = g.linear(g.global_avg_pool(x, "head.gap"), "head.fc", s.classes);
  g.output(x);
  g.validate();
  return g;
}

// A single bottleneck between an input and an output node.
struct BottleneckSpec {
  std::size_t in_channels = 0;
  std::size_t width = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  Variant variant = Variant::Slim;
  SlimConvConfig unit;  // channels and stride are ignored
  Shape input{4, 0, 6, 6};
};

inline ModelGraph bottleneck_graph(const BottleneckSpec& b) {
  if (b.input.c != b.in_channels) throw ConfigError("bottleneck: input_shape channels != in_channels");
  ModelGraph g;
  g.name = "bottleneck";
  BottleneckOptions opt;
  opt.variant = b.variant;
  opt.slim = b.unit;
  const std::size_t y = build_bottleneck(g, g.input(b.input), "block.", b.width, b.out_channels, b.stride, opt);
  g.output(y);
  g.validate();
  return g;
}

inline BottleneckSpec bottleneck_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SpecError("/", "expected a JSON object");
  for (const char* key : {"in_channels", "width", "out_channels"}) {
    if (!j.contains(key)) throw SpecError(std::string("/") + key, "missing");
  }
  BottleneckSpec b;
  b.in_channels = parse_count(j["in_channels"], "/in_channels");
  b.width = parse_count(j["width"], "/width");
  b.out_channels = parse_count(j["out_channels"], "/out_channels");
  if (j.contains("stride")) b.stride = parse_count(j["stride"], "/stride");
  if (j.contains("variant")) b.variant = detail::parse_enum(j["variant"], "/variant", {Variant::Plain, Variant::Slim});
  if (j.contains("k")) b.unit.k = parse_k(j["k"], "/k");
  if (j.contains("se_rule")) b.unit.se = parse_se_rule(j["se_rule"], "/se_rule");
  if (j.contains("flip_mode")) b.unit.flip_mode = parse_flip_mode(j["flip_mode"], "/flip_mode");
  if (j.contains("width_rule")) b.unit.width_rule = parse_width_rule(j["width_rule"], "/width_rule");
  b.input = Shape{4, b.in_channels, 6, 6};
  if (j.contains("input_shape")) {
    const auto d = detail::parse_counts(j["input_shape"], "/input_shape");
    if (d.size() != 4) throw SpecError("/input_shape", "expected [N, C, H, W]");
    b.input = Shape{d[0], d[1], d[2], d[3]};
  }
  for (auto [v, where] : {std::pair{b.in_channels, "/in_channels"}, std::pair{b.width, "/width"},
                          std::pair{b.out_channels, "/out_channels"}, std::pair{b.stride, "/stride"}}) {
    if (v == 0) throw SpecError(where, "must be positive");
  }
  return b;
}

// A graph with its parameters.
template <typename T>
struct Model {
  ModelSpec spec;
  ModelGraph graph;
  ParamStore<T> params;

  static Model create(const ModelSpec& s, std::uint64_t seed) {
    if (!s.executable()) {
      throw UsageError("model '" + s.name + "': family " + to_string(s.family) +
                       " is config-only (cost model), not executable");
    }
    Model m{s, build_graph(s), {}};
    declare_params(m.graph, m.params);
    m.params.initialize(seed);
    return m;
  }

  void save(const std::filesystem::path& dir) const {
    params.save(dir / "params");
    write_text_file(dir / "model.json", to_json(spec).dump(2) + "\n");
  }

  static Model load(const std::filesystem::path& dir) {
    Model m = create(model_spec_from_json(read_json_file(dir / "model.json")), 0);
    m.params.load(dir / "params");
    return m;
  }
};

}  // namespace slimconv
