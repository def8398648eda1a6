#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "slimconv/checks.hpp"
#include "slimconv/cost_model.hpp"
#include "slimconv/diagnostics.hpp"
#include "slimconv/train.hpp"

namespace slimconv::cli {

namespace fs = std::filesystem;

struct Globals {
  std::uint64_t seed = 1;
  std::string format = "text";
  std::string out;
};

// Which input file is being read, so schema errors can name it.
struct Context {
  Globals g;
  bool seed_given = false;
  std::string file;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;

  nlohmann::json load(const std::string& path) {
    file = path;
    return read_json_file(path);
  }

  void emit(const std::string& text) const {
    if (g.out.empty()) {
      *out << text;
    } else {
      write_text_file(g.out, text);
    }
  }
};

inline std::string sci(double v, int digits = 2) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(digits) << v;
  return os.str();
}

inline Shape parse_shape(const std::string& text) {
  std::vector<std::size_t> d;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t used = 0;
    long long v = -1;
    try {
      v = std::stoll(part, &used);
    } catch (const std::exception&) {
    }
    if (used != part.size() || v <= 0) throw UsageError("--input-shape: expected N,C,H,W with positive integers");
    d.push_back(static_cast<std::size_t>(v));
  }
  if (d.size() != 4) throw UsageError("--input-shape: expected N,C,H,W");
  return Shape{d[0], d[1], d[2], d[3]};
}

// The first `count` images of the synthetic recipe at the model's input size.
inline Tensor<float> synthetic_probe(const ModelSpec& s, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw UsageError("--probe-size must be positive");
  DatasetSpec d;
  d.classes = std::max<std::size_t>(s.classes, 2);
  d.per_class = (count + d.classes - 1) / d.classes;
  d.image = s.input;
  d.seed = seed;
  const Dataset data = make_synthetic(d);
  Tensor<float> out(Shape{count, s.input.c, s.input.h, s.input.w});
  std::copy_n(data.images.data(), out.numel(), out.data());
  return out;
}

// Accepts either a checkpoint directory or a training run directory.
inline Model<float> load_checkpoint(Context& ctx, const fs::path& dir) {
  fs::path d = dir;
  if (!fs::exists(d / "model.json") && fs::exists(d / "checkpoint" / "model.json")) d /= "checkpoint";
  if (!fs::exists(d / "model.json")) throw IoError("no checkpoint at " + dir.string() + " (missing model.json)");
  ctx.file = (d / "model.json").string();
  return Model<float>::load(d);
}

// --- profile -------------------------------------------------------------------

struct ProfileArgs {
  std::string model;
  std::string input_shape;
  std::optional<double> expect_params, expect_flops;
  double tolerance_pct = 1.0;
};

inline int profile(Context& ctx, const ProfileArgs& a) {
  ModelSpec spec = model_spec_from_json(ctx.load(a.model));
  if (!a.input_shape.empty()) spec.input = parse_shape(a.input_shape);
  const CostReport r = model_cost(spec);
  if (ctx.g.format == "json") {
    ctx.emit(cost_json(r).dump(2) + "\n");
  } else if (ctx.g.format == "csv") {
    ctx.emit(cost_csv(r));
  } else {
    ctx.emit(cost_text(r));
  }
  bool ok = true;
  auto check = [&](const char* what, double actual, std::optional<double> expected) {
    if (!expected) return;
    const double dev = 100.0 * (actual - *expected) / *expected;
    const bool pass = std::abs(dev) <= a.tolerance_pct;
    ok = ok && pass;
    *ctx.err << "check " << what << ": " << static_cast<std::uint64_t>(actual) << " vs " << fixed(*expected, 0) << " ("
             << fixed(dev, 3) << "%, tolerance " << a.tolerance_pct << "%): " << (pass ? "ok" : "FAILED") << "\n";
  };
  check("params", static_cast<double>(r.total_params), a.expect_params);
  check("flops", static_cast<double>(r.total_flops), a.expect_flops);
  return ok ? 0 : 1;
}

// --- sweep ---------------------------------------------------------------------

struct SweepArgs {
  std::string model;
  std::vector<std::string> ks{"4/3", "2", "8/3", "10/3", "4", "14/3", "16/3"};
  std::string input_shape;
};

inline int sweep(Context& ctx, const SweepArgs& a) {
  ModelSpec spec = model_spec_from_json(ctx.load(a.model));
  if (!a.input_shape.empty()) spec.input = parse_shape(a.input_shape);
  std::vector<Rational> ks;
  for (const auto& k : a.ks) {
    try {
      ks.push_back(Rational::parse(k));
    } catch (const ConfigError&) {
      throw UsageError("--k: cannot parse '" + k + "' as a rational");
    }
  }
  const SweepReport r = k_sweep(spec, ks);
  if (ctx.g.format == "json") {
    ctx.emit(sweep_json(r).dump(2) + "\n");
  } else if (ctx.g.format == "csv") {
    ctx.emit(sweep_csv(r));
  } else {
    ctx.emit(sweep_text(r));
  }
  return 0;
}

// --- gradcheck -----------------------------------------------------------------

struct GradcheckArgs {
  std::string unit = "slimconv";
  std::string spec;
  double step = 1e-4;
  std::size_t seeds = 1;
  double tolerance = 1e-4;
};

inline std::pair<ModelGraph, Shape> gradcheck_target(Context& ctx, const GradcheckArgs& a) {
  const nlohmann::json j = ctx.load(a.spec);
  if (a.unit == "slimconv") {
    const SlimConvConfig cfg = slimconv_config_from_json(j);
    validate(cfg);
    Shape in{2, cfg.channels, 6, 6};
    if (j.contains("input_shape")) {
      const auto d = detail::parse_counts(j["input_shape"], "/input_shape");
      if (d.size() != 4) throw SpecError("/input_shape", "expected [N, C, H, W]");
      in = Shape{d[0], d[1], d[2], d[3]};
    }
    return {unit_graph(cfg, in), in};
  }
  if (a.unit == "bottleneck") {
    const BottleneckSpec b = bottleneck_spec_from_json(j);
    return {bottleneck_graph(b), b.input};
  }
  const ModelSpec s = model_spec_from_json(j);
  if (!s.executable()) throw UsageError("model '" + s.name + "' is config-only and cannot be executed");
  return {build_graph(s), s.input};
}

inline int gradcheck(Context& ctx, const GradcheckArgs& a) {
  if (!(a.step > 0.0)) throw UsageError("--step must be positive");
  if (a.seeds == 0) throw UsageError("--seeds must be positive");
  const auto [g, input] = gradcheck_target(ctx, a);
  std::vector<std::pair<std::uint64_t, GradCheckResult>> results;
  bool ok = true;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.seeds; ++i) {
    const std::uint64_t seed = ctx.g.seed + i;
    const GradCheckResult r = gradcheck_graph(g, input, seed, a.step);
    ok = ok && r.passed(a.tolerance);
    worst = std::max(worst, r.finite ? r.max_rel_error : INFINITY);
    results.emplace_back(seed, r);
  }

  if (ctx.g.format == "json") {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [seed, r] : results) {
      nlohmann::json row{{"seed", seed},
                         {"max_rel_error", r.max_rel_error},
                         {"worst_param", r.worst_param},
                         {"worst_index", r.worst_index},
                         {"checked", r.checked},
                         {"skipped_kinks", r.skipped_kinks},
                         {"finite", r.finite}};
      if (!r.finite) row["nonfinite_param"] = r.nonfinite_param;
      rows.push_back(row);
    }
    ctx.emit(nlohmann::json{{"unit", a.unit},
                            {"graph", g.name},
                            {"step", a.step},
                            {"tolerance", a.tolerance},
                            {"seeds", rows},
                            {"passed", ok}}
                 .dump(2) +
             "\n");
  } else if (ctx.g.format == "csv") {
    std::ostringstream os;
    os << "seed,max_rel_error,worst_param,worst_index,checked,skipped_kinks,finite\n";
    for (const auto& [seed, r] : results) {
      os << seed << "," << sci(r.max_rel_error, 6) << "," << r.worst_param << "," << r.worst_index << "," << r.checked
         << "," << r.skipped_kinks << "," << (r.finite ? "true" : "false") << "\n";
    }
    ctx.emit(os.str());
  } else {
    std::ostringstream os;
    os << "gradcheck " << a.unit << " (" << g.name << "), step " << sci(a.step) << "\n";
    for (const auto& [seed, r] : results) {
      os << "  seed " << seed << ": ";
      if (!r.finite) {
        os << "non-finite value in " << r.nonfinite_param << "[" << r.nonfinite_index << "]\n";
        continue;
      }
      os << "max rel error " << sci(r.max_rel_error) << " at " << r.worst_param << "[" << r.worst_index << "], "
         << r.checked << " coordinates, " << r.skipped_kinks << " skipped at kinks\n";
    }
    os << (ok ? "PASS" : "FAIL") << ": max rel error " << sci(worst) << (ok ? " < " : " >= ") << sci(a.tolerance)
       << "\n";
    ctx.emit(os.str());
  }
  return ok ? 0 : 1;
}

// --- train ---------------------------------------------------------------------

struct TrainArgs {
  std::string spec;
  std::string config;
  std::string flip_mode;
};

inline int train_cmd(Context& ctx, const TrainArgs& a) {
  if (ctx.g.out.empty()) throw UsageError("train: --out DIR is required");
  ModelSpec spec = model_spec_from_json(ctx.load(a.spec));
  TrainConfig cfg = train_config_from_json(ctx.load(a.config));
  if (!a.flip_mode.empty()) spec.flip_mode = parse_flip_mode(a.flip_mode, "--flip-mode");
  if (ctx.seed_given) cfg.seed = ctx.g.seed;
  const Shape& img = cfg.dataset.image;
  if (img.c != spec.input.c || img.h != spec.input.h || img.w != spec.input.w) {
    throw ConfigError("train: dataset image_shape does not match the model input " + spec.input.str());
  }
  Model<float> m = Model<float>::create(spec, cfg.seed);
  const Dataset data = make_synthetic(cfg.dataset);
  const fs::path dir = ctx.g.out;
  write_text_file(dir / "config.json", to_json(cfg).dump(2) + "\n");

  TrainOptions opt;
  opt.out_dir = dir;
  const bool text = ctx.g.format == "text";
  if (text) {
    *ctx.out << "train " << spec.name << " (" << to_string(spec.flip_mode) << "), " << data.size()
             << " samples, seed " << cfg.seed << "\n";
    opt.on_epoch = [&](const EpochMetrics& e) {
      *ctx.out << "  epoch " << e.epoch << "  lr " << fixed(e.lr, 5) << "  loss " << fixed(e.loss, 5) << "  acc "
               << fixed(e.accuracy, 4) << "\n"
               << std::flush;
    };
  }
  const TrainResult r = train(m, data, cfg, opt);
  if (ctx.g.format == "json") {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& e : r.history) {
      hist.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}, {"acc", e.accuracy}});
    }
    *ctx.out << nlohmann::json{{"model", spec.name},
                               {"flip_mode", to_string(spec.flip_mode)},
                               {"checkpoint", (dir / "checkpoint").string()},
                               {"history", hist}}
                    .dump(2)
             << "\n";
  } else if (ctx.g.format == "csv") {
    *ctx.out << metrics_csv(r);
  } else {
    *ctx.out << "final train accuracy " << fixed(r.last().accuracy, 4) << " after " << r.history.size()
             << " epochs; checkpoint in " << (dir / "checkpoint").string() << "\n";
  }
  return 0;
}

// --- entropy / weights ----------------------------------------------------------

struct ProbeArgs {
  std::string checkpoint;
  std::string probe = "synthetic";
  std::size_t probe_size = 32;
};

struct EntropyArgs {
  ProbeArgs probe;
  std::size_t bins = 256;
  bool per_channel = false;
};

inline int entropy(Context& ctx, const EntropyArgs& a) {
  Model<float> m = load_checkpoint(ctx, a.probe.checkpoint);
  const EntropyReport r =
      entropy_report(m, synthetic_probe(m.spec, a.probe.probe_size, ctx.g.seed), {a.bins, a.per_channel});
  if (ctx.g.format == "json") {
    ctx.emit(to_json(r).dump(2) + "\n");
    return 0;
  }
  std::ostringstream os;
  if (ctx.g.format == "csv") {
    os << "block,bits,min,max\n" << std::setprecision(9);
    for (const auto& b : r.blocks) os << b.block << "," << b.bits << "," << b.min << "," << b.max << "\n";
  } else {
    os << "entropy of " << r.model << " block outputs (" << r.options.bins << " bins, "
       << (r.options.per_channel ? "per-channel mean" : "whole map") << ")\n";
    for (const auto& b : r.blocks) os << "  " << std::left << std::setw(20) << b.block << fixed(b.bits, 4) << " bits\n";
  }
  ctx.emit(os.str());
  return 0;
}

struct WeightsArgs {
  ProbeArgs probe;
  double eps = 0.01;
};

inline int weights(Context& ctx, const WeightsArgs& a) {
  Model<float> m = load_checkpoint(ctx, a.probe.checkpoint);
  const WeightProfile p = weight_profile(m, synthetic_probe(m.spec, a.probe.probe_size, ctx.g.seed), a.eps);
  const Savings s = prunable_savings(m.graph, p, a.eps);
  if (ctx.g.format == "json") {
    ctx.emit(nlohmann::json{{"profile", to_json(p)}, {"prunable", to_json(s)}}.dump(2) + "\n");
    return 0;
  }
  std::ostringstream os;
  if (ctx.g.format == "csv") {
    os << "unit,channels,frac_below_eps,frac_above_one_minus_eps,dead_pairs,params_saved,flops_saved\n"
       << std::setprecision(9);
    for (std::size_t i = 0; i < p.units.size(); ++i) {
      const auto& u = p.units[i];
      os << u.unit << "," << u.w.size() << "," << u.frac_low << "," << u.frac_high << "," << s.units[i].pairs << ","
         << s.units[i].params << "," << s.units[i].flops << "\n";
    }
  } else {
    if (!p.notice.empty()) os << p.notice << "\n";
    os << "channel weights of " << p.model << " (eps " << p.eps << ")\n";
    for (std::size_t i = 0; i < p.units.size(); ++i) {
      const auto& u = p.units[i];
      os << "  " << std::left << std::setw(18) << u.unit << "C=" << std::setw(5) << u.w.size() << "below "
         << fixed(u.frac_low, 3) << "  above " << fixed(u.frac_high, 3) << "  dead pairs " << s.units[i].pairs
         << "\n";
    }
    os << "prunable: " << s.params << " params, " << s.flops << " flops\n";
  }
  ctx.emit(os.str());
  return 0;
}

// --- entry point ------------------------------------------------------------------

inline void add_probe_options(CLI::App* sub, ProbeArgs& p) {
  sub->add_option("--checkpoint", p.checkpoint, "Checkpoint or training run directory")->required();
  sub->add_option("--probe", p.probe, "Probe data source")->check(CLI::IsMember({"synthetic"}));
  sub->add_option("--probe-size", p.probe_size, "Number of probe images");
}

// Exit codes: 0 success, 1 failed check, 2 usage or input error.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"SlimConv models: cost profiles, k-sweeps, gradient checks, toy training and diagnostics", "slimconv"};
  app.require_subcommand(1);
  app.fallthrough();
  Context ctx;
  ctx.out = &out;
  ctx.err = &err;
  auto* seed = app.add_option("--seed", ctx.g.seed, "Seed for initialization, probes and training");
  app.add_option("--format", ctx.g.format, "Output format")->check(CLI::IsMember({"json", "csv", "text"}));
  app.add_option("--out", ctx.g.out, "Write the report to PATH (train: run directory)");

  ProfileArgs pa;
  auto* prof = app.add_subcommand("profile", "Parameter and FLOP report ('mac-1': one multiply-add = one FLOP)");
  prof->add_option("--model", pa.model, "Model spec JSON")->required();
  prof->add_option("--input-shape", pa.input_shape, "Override input shape as N,C,H,W");
  prof->add_option("--expect-params", pa.expect_params, "Expected parameter count");
  prof->add_option("--expect-flops", pa.expect_flops, "Expected FLOPs");
  prof->add_option("--tolerance-pct", pa.tolerance_pct, "Allowed deviation for expectations, in percent");

  SweepArgs sa;
  auto* sw = app.add_subcommand("sweep", "Parameters and FLOPs of the Slim variant over compression factors k");
  sw->add_option("--model", sa.model, "Model spec JSON")->required();
  sw->add_option("--k", sa.ks, "Comma-separated k values, e.g. 4/3,2,8/3")->delimiter(',');
  sw->add_option("--input-shape", sa.input_shape, "Override input shape as N,C,H,W");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Central finite-difference check of analytic gradients (float64)");
  gc->add_option("--unit", ga.unit, "What the spec describes")->check(CLI::IsMember({"slimconv", "bottleneck", "model"}));
  gc->add_option("--spec", ga.spec, "Unit, bottleneck or model spec JSON")->required();
  gc->add_option("--step", ga.step, "Finite-difference step");
  gc->add_option("--seeds", ga.seeds, "Number of seeds, starting at --seed");
  gc->add_option("--tolerance", ga.tolerance, "Maximum allowed relative error");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train on the synthetic dataset; writes metrics.csv and checkpoint/ under --out");
  tr->add_option("--spec", ta.spec, "Model spec JSON")->required();
  tr->add_option("--config", ta.config, "Training config JSON")->required();
  tr->add_option("--flip-mode", ta.flip_mode, "Override the spec's flip mode")
      ->check(CLI::IsMember({"flip_bottom", "shared_no_flip", "flip_both"}));

  EntropyArgs ea;
  auto* en = app.add_subcommand("entropy", "Shannon entropy of every bottleneck output on a probe batch");
  add_probe_options(en, ea.probe);
  en->add_option("--bins", ea.bins, "Histogram bins");
  en->add_flag("--per-channel", ea.per_channel, "Average per-channel entropies instead of the whole map");

  WeightsArgs wa;
  auto* we = app.add_subcommand("weights", "SE channel-weight saturation and prunable flip pairs");
  add_probe_options(we, wa.probe);
  we->add_option("--eps", wa.eps, "Saturation threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }
  ctx.seed_given = seed->count() > 0;

  auto located = [&](const std::string& what) { return ctx.file.empty() ? what : ctx.file + ": " + what; };
  try {
    if (prof->parsed()) return profile(ctx, pa);
    if (sw->parsed()) return sweep(ctx, sa);
    if (gc->parsed()) return gradcheck(ctx, ga);
    if (tr->parsed()) return train_cmd(ctx, ta);
    if (en->parsed()) return entropy(ctx, ea);
    return weights(ctx, wa);
  } catch (const SpecError& e) {
    err << "error: " << located(e.what()) << "\n";
    return 2;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << located(e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace slimconv::cli
