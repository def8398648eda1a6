#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slimconv/cost_model.hpp"
#include "slimconv/executor.hpp"

namespace slimconv {

// Entropy in bits of a histogram with `bins` uniform bins over [min, max].
// Constant or empty input has all its mass in one bin: 0 bits.
template <typename T>
double shannon_entropy(std::span<const T> values, std::size_t bins = 256) {
  if (bins < 2) throw ConfigError("entropy: bins must be at least 2");
  if (values.empty()) return 0.0;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = static_cast<double>(*lo_it), hi = static_cast<double>(*hi_it);
  if (!(hi > lo)) return 0.0;
  std::vector<std::size_t> counts(bins, 0);
  const double scale = static_cast<double>(bins) / (hi - lo);
  for (T v : values) {
    const auto b = static_cast<std::size_t>((static_cast<double>(v) - lo) * scale);
    ++counts[std::min(b, bins - 1)];
  }
  const double total = static_cast<double>(values.size());
  double h = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log2(p);
  }
  return h;
}

// Mean over channels of the entropy of each channel's N*H*W values.
template <typename T>
double channel_entropy(const Tensor<T>& t, std::size_t bins = 256) {
  const Shape& s = t.shape();
  if (s.c == 0) return 0.0;
  std::vector<T> buf(s.n * s.plane());
  double sum = 0.0;
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* src = t.data() + (n * s.c + c) * s.plane();
      std::copy(src, src + s.plane(), buf.begin() + n * s.plane());
    }
    sum += shannon_entropy<T>(buf, bins);
  }
  return sum / static_cast<double>(s.c);
}

struct EntropyOptions {
  std::size_t bins = 256;
  bool per_channel = false;
};

struct BlockEntropy {
  std::string block;
  double bits = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct EntropyReport {
  std::string model;
  EntropyOptions options;
  std::vector<BlockEntropy> blocks;
};

// Entropy of every bottleneck output for one eval-mode pass over `batch`.
template <typename T>
EntropyReport entropy_report(Model<T>& m, const Tensor<T>& batch, EntropyOptions opt = {}) {
  EntropyReport r{m.spec.name, opt, {}};
  Tape<T> tape(TapeOptions{.record = false});
  forward(tape, m, batch, Mode::Eval, Capture<T>([&](const LayerNode& n, const Var<T>& v) {
            if (n.role != Role::BlockOutput) return;
            const Tensor<T>& t = v.value();
            const auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
            const double bits = opt.per_channel ? channel_entropy(t, opt.bins) : shannon_entropy(t.span(), opt.bins);
            r.blocks.push_back({n.name, bits, static_cast<double>(*lo), static_cast<double>(*hi)});
          }));
  return r;
}

inline nlohmann::json to_json(const EntropyReport& r) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : r.blocks) blocks.push_back({{"block", b.block}, {"bits", b.bits}, {"min", b.min}, {"max", b.max}});
  return {{"model", r.model},
          {"bins", r.options.bins},
          {"scope", r.options.per_channel ? "per_channel" : "whole_map"},
          {"blocks", blocks}};
}

struct UnitWeights {
  std::string unit;
  std::vector<double> w;  // mean over the probe batch
  double frac_low = 0.0;  // w < eps
  double frac_high = 0.0; // w > 1 - eps
  std::vector<std::size_t> ones;
};

struct WeightProfile {
  std::string model;
  double eps = 0.01;
  std::vector<UnitWeights> units;
  std::string notice;  // set when the model has no SlimConv units
};

inline void check_eps(double eps) {
  if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("weight profile: eps must be in (0, 0.5)");
}

inline UnitWeights profile_from_weights(const std::string& unit, std::vector<double> w, double eps) {
  check_eps(eps);
  UnitWeights u{unit, std::move(w), 0.0, 0.0, {}};
  if (u.w.empty()) return u;
  std::size_t low = 0;
  for (std::size_t c = 0; c < u.w.size(); ++c) {
    if (u.w[c] < eps) ++low;
    if (u.w[c] > 1.0 - eps) u.ones.push_back(c);
  }
  u.frac_low = static_cast<double>(low) / static_cast<double>(u.w.size());
  u.frac_high = static_cast<double>(u.ones.size()) / static_cast<double>(u.w.size());
  return u;
}

// Channel weights of every SlimConv unit, averaged over an eval-mode pass.
template <typename T>
WeightProfile weight_profile(Model<T>& m, const Tensor<T>& batch, double eps = 0.01) {
  check_eps(eps);
  WeightProfile p{m.spec.name, eps, {}, {}};
  if (m.graph.units().empty()) {
    p.notice = "model '" + m.spec.name + "' has no SlimConv units";
    return p;
  }
  std::vector<std::pair<std::string, std::vector<double>>> raw;
  Tape<T> tape(TapeOptions{.record = false});
  forward(tape, m, batch, Mode::Eval, Capture<T>([&](const LayerNode& n, const Var<T>& v) {
            if (n.role != Role::SeWeights) return;
            const Tensor<T>& t = v.value();
            const Shape& s = t.shape();
            std::vector<double> mean(s.c, 0.0);
            for (std::size_t i = 0; i < s.n; ++i)
              for (std::size_t c = 0; c < s.c; ++c) mean[c] += static_cast<double>(t[i * s.c + c]);
            for (double& x : mean) x /= static_cast<double>(s.n);
            raw.emplace_back(m.graph.units().at(static_cast<std::size_t>(n.unit)).prefix, std::move(mean));
          }));
  for (auto& [unit, w] : raw) p.units.push_back(profile_from_weights(unit, std::move(w), eps));
  return p;
}

inline nlohmann::json to_json(const WeightProfile& p) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : p.units) {
    units.push_back({{"unit", u.unit},
                     {"channels", u.w.size()},
                     {"frac_below_eps", u.frac_low},
                     {"frac_above_one_minus_eps", u.frac_high},
                     {"ones", u.ones},
                     {"w", u.w}});
  }
  nlohmann::json j{{"model", p.model}, {"eps", p.eps}, {"units", units}};
  if (!p.notice.empty()) j["notice"] = p.notice;
  return j;
}

struct UnitSavings {
  std::string unit;
  std::size_t pairs = 0;    // flip pairs with both weights below eps
  std::size_t removed = 0;  // transformer input channels dropped per pathway
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct Savings {
  std::vector<UnitSavings> units;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

// A channel c feeds the top pathway through w[c] and the bottom one through
// w[C-1-c], so only flip pairs with both weights near zero are dead. Each dead
// pair drops one input channel of the top 3x3 and of the bottom 1x1.
inline Savings prunable_savings(const ModelGraph& g, const WeightProfile& p, double eps) {
  check_eps(eps);
  auto find = [&](const std::string& name) -> const LayerNode& {
    for (const auto& n : g.nodes())
      if (n.name == name) return n;
    throw ContractViolation("prunable_savings: graph has no node '" + name + "'");
  };
  Savings s;
  for (const UnitWeights& u : p.units) {
    const auto it = std::find_if(g.units().begin(), g.units().end(), [&](const UnitInfo& i) { return i.prefix == u.unit; });
    if (it == g.units().end()) throw ContractViolation("prunable_savings: profile unit '" + u.unit + "' not in graph");
    const std::size_t c = u.w.size();
    if (c != it->config.channels) throw ContractViolation("prunable_savings: profile and graph widths differ");
    UnitSavings out{u.unit};
    for (std::size_t i = 0; i < c / 2; ++i) {
      if (u.w[i] < eps && u.w[c - 1 - i] < eps) ++out.pairs;
    }
    const LayerNode& top = find(u.unit + "top.conv3");
    const LayerNode& bot = find(u.unit + "bottom.conv1");
    out.removed = std::min({out.pairs, top.in_channels, bot.in_channels});
    const std::uint64_t top_per = top.out_channels / top.groups * top.kernel * top.kernel;
    const std::uint64_t bot_per = bot.out_channels / bot.groups * bot.kernel * bot.kernel;
    out.params = out.removed * (top_per + bot_per);
    out.flops = out.removed * (top_per * top.out.h * top.out.w + bot_per * bot.out.h * bot.out.w);
    s.params += out.params;
    s.flops += out.flops;
    s.units.push_back(out);
  }
  return s;
}

inline nlohmann::json to_json(const Savings& s) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : s.units) {
    units.push_back(
        {{"unit", u.unit}, {"dead_pairs", u.pairs}, {"removed", u.removed}, {"params", u.params}, {"flops", u.flops}});
  }
  return {{"units", units}, {"params_saved", s.params}, {"flops_saved", s.flops}};
}

}  // namespace slimconv
