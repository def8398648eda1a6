#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slimconv/graph.hpp"
#include "slimconv/model_zoo.hpp"

namespace slimconv {

// One multiply-accumulate counts as one FLOP; BN, activations, pooling,
// residual adds and the SE weighting are counted too.
inline constexpr const char* kCostConvention = "mac-1";

struct LayerCost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

// Cost of one node for a single sample; `in` is the shape of its first input.
inline LayerCost layer_cost(const LayerNode& n, const Shape& in) {
  const std::uint64_t in_elems = in.c * in.h * in.w;
  const std::uint64_t out_area = n.out.h * n.out.w;
  switch (n.kind) {
    case LayerKind::Input:
    case LayerKind::Output:
    case LayerKind::FlipChannels:
    case LayerKind::ConcatChannels:
      return {};
    case LayerKind::Conv: {
      const std::uint64_t w = n.out_channels * (n.in_channels / n.groups) * n.kernel * n.kernel;
      const std::uint64_t b = n.bias ? n.out_channels : 0;
      return {w + b, w * out_area + b * out_area};
    }
    case LayerKind::BatchNorm:
      return {2 * in.c, 2 * in_elems};
    case LayerKind::ReLU:
    case LayerKind::Sigmoid:
    case LayerKind::MaxPool:
    case LayerKind::GlobalAvgPool:
    case LayerKind::Add:
    case LayerKind::MulChannelwise:
      return {0, in_elems};
    case LayerKind::Linear:
      return {n.in_channels * n.out_channels + n.out_channels, n.in_channels * n.out_channels + n.out_channels};
    case LayerKind::SplitSum:
      // Every channel beyond the first chunk is one add per pixel.
      return {0, (in.c - n.out.c) * in.h * in.w};
  }
  throw UnsupportedLayer("cost model: node '" + n.name + "' has an unsupported kind");
}

struct CostRow {
  std::string node;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::string model;
  std::string convention = kCostConvention;
  Shape input;
  std::vector<CostRow> rows;  // topological order
  std::uint64_t total_params = 0;
  std::uint64_t total_flops = 0;
};

// Costs for a batch of `batch` samples (params do not scale with it).
inline CostReport model_cost(const ModelGraph& g, std::size_t batch = 1) {
  CostReport r;
  r.model = g.name;
  const Shape& in = g.input_shape();
  r.input = Shape{batch, in.c, in.h, in.w};
  for (const LayerNode& n : g.nodes()) {
    const Shape& first = n.inputs.empty() ? n.out : g.node(n.inputs[0]).out;
    const LayerCost c = layer_cost(n, first);
    r.rows.push_back({n.name, to_string(n.kind), c.params, c.flops * batch});
    r.total_params += c.params;
    r.total_flops += c.flops * batch;
  }
  return r;
}

inline CostReport model_cost(const ModelSpec& s) { return model_cost(build_graph(s), s.input.n); }

inline std::string cost_csv(const CostReport& r) {
  std::ostringstream os;
  os << "node,kind,params,flops\n";
  for (const auto& row : r.rows) os << row.node << "," << row.kind << "," << row.params << "," << row.flops << "\n";
  os << "TOTAL,," << r.total_params << "," << r.total_flops << "\n";
  return os.str();
}

inline nlohmann::json cost_json(const CostReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"node", row.node}, {"kind", row.kind}, {"params", row.params}, {"flops", row.flops}});
  }
  return {{"model", r.model},
          {"convention", r.convention},
          {"input_shape", {r.input.n, r.input.c, r.input.h, r.input.w}},
          {"rows", rows},
          {"total", {{"params", r.total_params}, {"flops", r.total_flops}}}};
}

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline std::string cost_text(const CostReport& r) {
  std::ostringstream os;
  os << r.model << " @ " << r.input.str() << " (" << r.convention << ")\n";
  os << "  params: " << r.total_params << " (" << fixed(r.total_params / 1e6, 3) << " M)\n";
  os << "  flops:  " << r.total_flops << " (" << fixed(r.total_flops / 1e9, 3) << " G)\n";
  return os.str();
}

struct SweepRow {
  Rational k;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  double compressed_pct = 0.0;  // relative to the plain model's params
  std::string error;            // set when this k is invalid; other fields are 0
};

struct SweepReport {
  std::string model;
  std::uint64_t plain_params = 0;
  std::uint64_t plain_flops = 0;
  std::vector<SweepRow> rows;  // sorted by k
};

// Rebuilds `base` as a Slim model for every k and compares against the plain
// model of the same family. Invalid k values produce an error row.
inline SweepReport k_sweep(const ModelSpec& base, std::vector<Rational> ks) {
  std::sort(ks.begin(), ks.end());
  ModelSpec plain = base;
  plain.variant = Variant::Plain;
  const CostReport p = model_cost(plain);
  SweepReport out{base.name, p.total_params, p.total_flops, {}};
  for (const Rational& k : ks) {
    SweepRow row;
    row.k = k;
    try {
      ModelSpec s = base;
      s.variant = Variant::Slim;
      s.k = k;
      const CostReport c = model_cost(s);
      row.params = c.total_params;
      row.flops = c.total_flops;
      row.compressed_pct = 100.0 * (1.0 - static_cast<double>(c.total_params) / static_cast<double>(p.total_params));
    } catch (const ConfigError& e) {
      row.error = e.what();
    }
    out.rows.push_back(row);
  }
  return out;
}

inline std::string sweep_csv(const SweepReport& r) {
  std::ostringstream os;
  os << "k,params,flops,compressed_pct,error\n";
  for (const auto& row : r.rows) {
    os << row.k.str() << "," << row.params << "," << row.flops << "," << fixed(row.compressed_pct, 2) << ","
       << (row.error.empty() ? "" : "\"" + row.error + "\"") << "\n";
  }
  return os.str();
}

inline nlohmann::json sweep_json(const SweepReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j{{"k", row.k.str()}};
    if (row.error.empty()) {
      j["params"] = row.params;
      j["flops"] = row.flops;
      j["compressed_pct"] = std::round(row.compressed_pct * 100.0) / 100.0;
    } else {
      j["error"] = row.error;
    }
    rows.push_back(j);
  }
  return {{"model", r.model},
          {"convention", kCostConvention},
          {"plain", {{"params", r.plain_params}, {"flops", r.plain_flops}}},
          {"rows", rows}};
}

inline std::string sweep_text(const SweepReport& r) {
  std::ostringstream os;
  os << r.model << ": plain " << fixed(r.plain_params / 1e6, 3) << " M params, " << fixed(r.plain_flops / 1e9, 3)
     << " G flops\n";
  os << "  k       params(M)  flops(G)  compressed(%)\n";
  for (const auto& row : r.rows) {
    os << "  " << std::left << std::setw(8) << row.k.str();
    if (!row.error.empty()) {
      os << "error: " << row.error << "\n";
      continue;
    }
    os << std::setw(11) << fixed(row.params / 1e6, 3) << std::setw(10) << fixed(row.flops / 1e9, 3)
       << fixed(row.compressed_pct, 2) << "\n";
  }
  return os.str();
}

}  // namespace slimconv
