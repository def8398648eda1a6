#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>

#include <nlohmann/json.hpp>

#include "slimconv/ops.hpp"
#include "slimconv/params.hpp"
#include "slimconv/rational.hpp"

namespace slimconv {

enum class FlipMode { FlipBottom, SharedNoFlip, FlipBoth };

// Folded divides the input into f = 3k/2 summed chunks of width C/f; the top
// transformer keeps that width and the bottom one halves it. Proportional
// always halves the input and splits floor(C/k) outputs 2:1 between the
// pathways. Both agree at k = 4/3 when 4 divides C.
enum class WidthRule { Folded, Proportional };

// Hidden width of the SE bottleneck: C/r, or max(C/r, L).
struct SeRule {
  enum class Kind { FixedRatio, MaxRule };
  Kind kind = Kind::FixedRatio;
  std::size_t r = 32;
  std::size_t min_width = 0;

  static SeRule fixed(std::size_t r) { return {Kind::FixedRatio, r, 0}; }
  static SeRule max_rule(std::size_t r, std::size_t l) { return {Kind::MaxRule, r, l}; }

  std::size_t hidden(std::size_t channels) const {
    if (r == 0) throw ConfigError("se_rule: ratio must be positive");
    const std::size_t h = channels / r;
    return kind == Kind::MaxRule ? std::max(h, min_width) : h;
  }

  bool operator==(const SeRule&) const = default;
};

struct SlimConvConfig {
  std::size_t channels = 0;
  Rational k{4, 3};
  SeRule se;
  FlipMode flip_mode = FlipMode::FlipBottom;
  std::size_t stride = 1;
  WidthRule width_rule = WidthRule::Folded;
  // Groups of both 3x3 transformers. A group count that does not divide a
  // pathway's width falls back to gcd(groups, width) for that pathway.
  std::size_t groups = 1;

  bool operator==(const SlimConvConfig&) const = default;
};

struct PathwayWidths {
  std::size_t c_out = 0;
  std::size_t c_top = 0;
  std::size_t c_bot = 0;
  std::size_t c_in = 0;   // width of each reconstructed pathway input
  std::size_t parts = 2;  // chunks summed by the reconstruct step

  bool operator==(const PathwayWidths&) const = default;
};

inline PathwayWidths pathway_widths(const SlimConvConfig& cfg) {
  const std::size_t c = cfg.channels;
  if (c < 2 || c % 2 != 0) throw ConfigError("slimconv: C=" + std::to_string(c) + " must be even and > 1");
  if (cfg.k <= Rational(1)) throw ConfigError("slimconv: k=" + cfg.k.str() + " must exceed 1");
  PathwayWidths p;
  if (cfg.width_rule == WidthRule::Proportional) {
    p.parts = 2;
    p.c_in = c / 2;
    p.c_out = static_cast<std::size_t>(c * cfg.k.den / cfg.k.num);
    p.c_bot = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(p.c_out) / 3.0)));
    if (p.c_out < 2) throw ConfigError("slimconv: C=" + std::to_string(c) + ", k=" + cfg.k.str() + " gives fewer than 2 outputs");
    p.c_top = p.c_out - p.c_bot;
    return p;
  }
  const Rational fold = cfg.k * Rational(3, 2);
  if (fold.den != 1 || fold.num < 2) {
    throw ConfigError("slimconv: k=" + cfg.k.str() + " needs 3k/2 to be an integer >= 2 under the folded width rule");
  }
  p.parts = static_cast<std::size_t>(fold.num);
  if (c < 2 * p.parts) {
    throw ConfigError("slimconv: C=" + std::to_string(c) + " too small for k=" + cfg.k.str());
  }
  p.c_in = c / p.parts;
  p.c_top = p.c_in;
  p.c_bot = p.c_in / 2;
  p.c_out = p.c_top + p.c_bot;
  return p;
}

inline std::size_t effective_groups(std::size_t groups, std::size_t in, std::size_t out) {
  return std::gcd(groups, std::gcd(in, out));
}

inline void validate(const SlimConvConfig& cfg) {
  pathway_widths(cfg);
  if (cfg.stride == 0) throw ConfigError("slimconv: stride must be positive");
  if (cfg.groups == 0) throw ConfigError("slimconv: groups must be positive");
  if (cfg.se.hidden(cfg.channels) == 0) {
    throw ConfigError("slimconv: SE hidden width is 0 for C=" + std::to_string(cfg.channels) +
                      " (use a smaller ratio or a minimum width)");
  }
}

// Closed-form parameter count of one unit: SE (fc1 without bias, BN, fc2 with
// bias) plus the three bias-free transformer convs and their BN pairs.
inline std::size_t slimconv_param_count(const SlimConvConfig& cfg) {
  validate(cfg);
  const auto p = pathway_widths(cfg);
  const std::size_t c = cfg.channels, h = cfg.se.hidden(c);
  const std::size_t gt = effective_groups(cfg.groups, p.c_in, p.c_top);
  const std::size_t gb = effective_groups(cfg.groups, p.c_bot, p.c_bot);
  const std::size_t se = c * h + 2 * h + h * c + c;
  const std::size_t top = 9 * (p.c_in / gt) * p.c_top + 2 * p.c_top;
  const std::size_t bot = p.c_in * p.c_bot + 2 * p.c_bot + 9 * (p.c_bot / gb) * p.c_bot + 2 * p.c_bot;
  return se + top + bot;
}

// Tensor names of a unit relative to its prefix.
namespace slimconv_names {
inline const std::string se_fc1 = "se.fc1.weight";
inline const std::string se_bn = "se.bn.";
inline const std::string se_fc2 = "se.fc2.weight";
inline const std::string se_fc2_bias = "se.fc2.bias";
inline const std::string top_conv = "top.conv3.weight";
inline const std::string top_bn = "top.bn.";
inline const std::string bot_conv1 = "bottom.conv1.weight";
inline const std::string bot_bn1 = "bottom.bn1.";
inline const std::string bot_conv3 = "bottom.conv3.weight";
inline const std::string bot_bn3 = "bottom.bn3.";
}  // namespace slimconv_names

template <typename T>
void add_slimconv_params(ParamStore<T>& store, const SlimConvConfig& cfg, const std::string& prefix = "") {
  namespace n = slimconv_names;
  validate(cfg);
  const auto p = pathway_widths(cfg);
  const std::size_t c = cfg.channels, h = cfg.se.hidden(c);
  const std::size_t gt = effective_groups(cfg.groups, p.c_in, p.c_top);
  const std::size_t gb = effective_groups(cfg.groups, p.c_bot, p.c_bot);
  store.add(prefix + n::se_fc1, Shape{h, c, 1, 1}, Init::FanOutNormal);
  add_batch_norm_params(store, prefix + n::se_bn, h);
  store.add(prefix + n::se_fc2, Shape{c, h, 1, 1}, Init::FanOutNormal);
  store.add(prefix + n::se_fc2_bias, Shape{1, c, 1, 1}, Init::Zeros);
  store.add(prefix + n::top_conv, Shape{p.c_top, p.c_in / gt, 3, 3}, Init::FanOutNormal);
  add_batch_norm_params(store, prefix + n::top_bn, p.c_top);
  store.add(prefix + n::bot_conv1, Shape{p.c_bot, p.c_in, 1, 1}, Init::FanOutNormal);
  add_batch_norm_params(store, prefix + n::bot_bn1, p.c_bot);
  store.add(prefix + n::bot_conv3, Shape{p.c_bot, p.c_bot / gb, 3, 3}, Init::FanOutNormal);
  add_batch_norm_params(store, prefix + n::bot_bn3, p.c_bot);
}

// w = sigmoid(fc2(relu(bn(fc1(gap(x)))))), shape [N,C,1,1].
template <typename T>
Var<T> se_weights(ParamBinding<T>& p, const Var<T>& x, const SlimConvConfig& cfg, Mode mode,
                  const std::string& prefix = "") {
  namespace n = slimconv_names;
  if (x.shape().c != cfg.channels) {
    throw ContractViolation("se_weights: input has C=" + std::to_string(x.shape().c) + ", unit expects " +
                            std::to_string(cfg.channels));
  }
  Tape<T>& t = p.tape();
  Var<T> z = ops::global_avg_pool(t, x);
  Var<T> hdn = ops::conv2d(t, z, p(prefix + n::se_fc1), nullptr, {});
  hdn = ops::relu(t, apply_batch_norm(p, hdn, prefix + n::se_bn, mode));
  const Var<T>& bias = p(prefix + n::se_fc2_bias);
  return ops::sigmoid(t, ops::conv2d(t, hdn, p(prefix + n::se_fc2), &bias, {}));
}

// Weighted channel folding: (w*x) cut into `parts` chunks that are summed.
template <typename T>
Var<T> reconstruct_pathway(Tape<T>& t, const Var<T>& x, const Var<T>& w, std::size_t parts = 2) {
  return ops::split_sum(t, ops::mul_channelwise(t, x, w), parts);
}

// Intermediate values of a forward pass, for diagnostics and tests.
template <typename T>
struct SlimConvTrace {
  Var<T> w;
  Var<T> top_input;
  Var<T> bottom_input;
};

template <typename T>
Var<T> slimconv_forward(ParamBinding<T>& p, const Var<T>& x, const SlimConvConfig& cfg, Mode mode,
                        const std::string& prefix = "", SlimConvTrace<T>* trace = nullptr) {
  namespace n = slimconv_names;
  const auto widths = pathway_widths(cfg);
  Tape<T>& t = p.tape();
  Var<T> w = se_weights(p, x, cfg, mode, prefix);
  Var<T> w_top = w, w_bot = w;
  if (cfg.flip_mode == FlipMode::FlipBottom) w_bot = ops::flip_channels(t, w);
  if (cfg.flip_mode == FlipMode::FlipBoth) w_top = w_bot = ops::flip_channels(t, w);

  const std::size_t gt = effective_groups(cfg.groups, widths.c_in, widths.c_top);
  const std::size_t gb = effective_groups(cfg.groups, widths.c_bot, widths.c_bot);

  Var<T> top_in = reconstruct_pathway(t, x, w_top, widths.parts);
  Var<T> top = ops::conv2d(t, top_in, p(prefix + n::top_conv), nullptr, {cfg.stride, 1, gt});
  top = ops::relu(t, apply_batch_norm(p, top, prefix + n::top_bn, mode));

  Var<T> bot_in = reconstruct_pathway(t, x, w_bot, widths.parts);
  Var<T> bot = ops::conv2d(t, bot_in, p(prefix + n::bot_conv1), nullptr, {});
  bot = ops::relu(t, apply_batch_norm(p, bot, prefix + n::bot_bn1, mode));
  bot = ops::conv2d(t, bot, p(prefix + n::bot_conv3), nullptr, {cfg.stride, 1, gb});
  bot = ops::relu(t, apply_batch_norm(p, bot, prefix + n::bot_bn3, mode));

  if (trace) *trace = {w, top_in, bot_in};
  return ops::concat_channels(t, top, bot);
}

// --- JSON descriptors ----------------------------------------------------------

inline const char* to_string(FlipMode m) {
  switch (m) {
    case FlipMode::FlipBottom: return "flip_bottom";
    case FlipMode::SharedNoFlip: return "shared_no_flip";
    case FlipMode::FlipBoth: return "flip_both";
  }
  return "?";
}

inline const char* to_string(WidthRule r) { return r == WidthRule::Folded ? "folded" : "proportional"; }

inline FlipMode parse_flip_mode(const nlohmann::json& j, const std::string& where) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    for (FlipMode m : {FlipMode::FlipBottom, FlipMode::SharedNoFlip, FlipMode::FlipBoth})
      if (s == to_string(m)) return m;
  }
  throw SpecError(where, "expected one of flip_bottom, shared_no_flip, flip_both");
}

inline WidthRule parse_width_rule(const nlohmann::json& j, const std::string& where) {
  if (j == "folded") return WidthRule::Folded;
  if (j == "proportional") return WidthRule::Proportional;
  throw SpecError(where, "expected folded or proportional");
}

inline std::size_t parse_count(const nlohmann::json& j, const std::string& where) {
  if (!j.is_number_integer() || j.get<std::int64_t>() < 0) throw SpecError(where, "expected a non-negative integer");
  return j.get<std::size_t>();
}

inline Rational parse_k(const nlohmann::json& j, const std::string& where) {
  if (j.is_number_integer()) return Rational(j.get<std::int64_t>());
  if (!j.is_string()) throw SpecError(where, "expected a fraction string such as \"4/3\"");
  try {
    return Rational::parse(j.get<std::string>());
  } catch (const ConfigError& e) {
    throw SpecError(where, e.what());
  }
}

inline nlohmann::json se_rule_json(const SeRule& r) {
  if (r.kind == SeRule::Kind::FixedRatio) return {{"kind", "fixed_ratio"}, {"r", r.r}};
  return {{"kind", "max_rule"}, {"r", r.r}, {"L", r.min_width}};
}

inline SeRule parse_se_rule(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("kind")) throw SpecError(where, "expected {\"kind\": ..., \"r\": ...}");
  const auto& kind = j.at("kind");
  if (!j.contains("r")) throw SpecError(where + "/r", "missing");
  const std::size_t r = parse_count(j.at("r"), where + "/r");
  if (r == 0) throw SpecError(where + "/r", "must be positive");
  if (kind == "fixed_ratio") return SeRule::fixed(r);
  if (kind == "max_rule") {
    if (!j.contains("L")) throw SpecError(where + "/L", "missing");
    return SeRule::max_rule(r, parse_count(j.at("L"), where + "/L"));
  }
  throw SpecError(where + "/kind", "expected fixed_ratio or max_rule");
}

inline nlohmann::json to_json(const SlimConvConfig& cfg) {
  nlohmann::json j{{"C", cfg.channels},
                   {"k", cfg.k.str()},
                   {"se_rule", se_rule_json(cfg.se)},
                   {"flip_mode", to_string(cfg.flip_mode)},
                   {"stride", cfg.stride},
                   {"width_rule", to_string(cfg.width_rule)}};
  if (cfg.groups != 1) j["groups"] = cfg.groups;
  return j;
}

inline SlimConvConfig slimconv_config_from_json(const nlohmann::json& j, const std::string& base = "") {
  if (!j.is_object()) throw SpecError(base.empty() ? "/" : base, "expected an object");
  SlimConvConfig cfg;
  if (!j.contains("C")) throw SpecError(base + "/C", "missing");
  cfg.channels = parse_count(j.at("C"), base + "/C");
  if (j.contains("k")) cfg.k = parse_k(j.at("k"), base + "/k");
  if (j.contains("se_rule")) cfg.se = parse_se_rule(j.at("se_rule"), base + "/se_rule");
  if (j.contains("flip_mode")) cfg.flip_mode = parse_flip_mode(j.at("flip_mode"), base + "/flip_mode");
  if (j.contains("stride")) cfg.stride = parse_count(j.at("stride"), base + "/stride");
  if (j.contains("width_rule")) cfg.width_rule = parse_width_rule(j.at("width_rule"), base + "/width_rule");
  if (j.contains("groups")) cfg.groups = parse_count(j.at("groups"), base + "/groups");
  return cfg;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SpecError("/", path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// A standalone unit: configuration plus its parameters.
template <typename T>
struct SlimConvUnit {
  SlimConvConfig config;
  ParamStore<T> params;

  static SlimConvUnit create(const SlimConvConfig& cfg, std::uint64_t seed) {
    SlimConvUnit u{cfg, {}};
    add_slimconv_params(u.params, cfg);
    u.params.initialize(seed);
    return u;
  }

  void save(const std::filesystem::path& dir) const {
    params.save(dir);
    write_text_file(dir / "unit.json", to_json(config).dump(2) + "\n");
  }

  static SlimConvUnit load(const std::filesystem::path& dir) {
    SlimConvUnit u{slimconv_config_from_json(read_json_file(dir / "unit.json")), {}};
    validate(u.config);
    add_slimconv_params(u.params, u.config);
    u.params.load(dir);
    return u;
  }
};

}  // namespace slimconv
