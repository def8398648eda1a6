// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "slimconv/checks.hpp"
#include "slimconv/cost_model.hpp"
#include "slimconv/diagnostics.hpp"
#include "slimconv/train.hpp"

namespace sc = slimconv;
namespace fs = std::filesystem;

namespace {

const fs::path kSpecs = SLIMCONV_SPECS_DIR;

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string pct_dev(double actual, double target) { return fmt("%+.2f%%", 100.0 * (actual - target) / target); }

bool within(double actual, double target, double pct) { return std::abs(actual - target) <= target * pct / 100.0; }

struct Target {
  const char* spec;
  double value;
  double tolerance_pct;
};

Outcome cost_targets(const std::vector<Target>& targets, bool params, double unit, const char* suffix) {
  Outcome o;
  for (const auto& t : targets) {
    Clock clock;
    const auto r = sc::model_cost(sc::load_model_spec(kSpecs / t.spec));
    const double secs = clock.seconds();
    const double v = static_cast<double>(params ? r.total_params : r.total_flops);
    const bool ok = within(v, t.value, t.tolerance_pct) && secs < 1.0;
    o.pass = o.pass && ok;
    o.detail += std::string(t.spec) + " " + fmt("%.3f", v / unit) + suffix + " (" + pct_dev(v, t.value) + ", " +
                fmt("%.3fs", secs) + (ok ? ")" : ", OUT OF BOUNDS)") + "; ";
  }
  return o;
}

Outcome criterion1() {
  return cost_targets({{"resnet50.json", 25.56e6, 0.5},
                       {"resnet101.json", 44.55e6, 0.5},
                       {"sc-resnet50.json", 16.76e6, 2.0},
                       {"sc-resnet101.json", 27.96e6, 2.0}},
                      true, 1e6, "M");
}

Outcome criterion2() {
  return cost_targets({{"resnet50.json", 4.12e9, 3.0},
                       {"sc-resnet50.json", 2.69e9, 5.0},
                       {"resnet101.json", 7.84e9, 3.0},
                       {"sc-resnet101.json", 4.87e9, 5.0}},
                      false, 1e9, "G");
}

Outcome criterion3() {
  const auto spec = sc::load_model_spec(kSpecs / "cifar-sc-resnet50.json");
  std::vector<sc::Rational> ks;
  for (const char* k : {"4/3", "2", "8/3", "10/3", "4", "14/3", "16/3"}) ks.push_back(sc::Rational::parse(k));
  const auto r = sc::k_sweep(spec, ks);
  Outcome o;
  double prev = -1.0;
  for (const auto& row : r.rows) {
    if (!row.error.empty()) {
      o.pass = false;
      o.detail += row.k.str() + " error; ";
      continue;
    }
    if (!(row.compressed_pct > prev)) o.pass = false;
    prev = row.compressed_pct;
    o.detail += row.k.str() + ":" + fmt("%.2f%%", row.compressed_pct) + " ";
    if (row.k == sc::Rational(8, 3) && !(row.compressed_pct > 55.0)) o.pass = false;
  }
  const bool abs_ok = within(static_cast<double>(r.plain_params), 23.71e6, 5.0) &&
                      within(static_cast<double>(r.plain_flops), 1.305e9, 5.0);
  o.detail += "| CIFAR plain " + fmt("%.3fM", r.plain_params / 1e6) + " " + fmt("%.3fG", r.plain_flops / 1e9) +
              (abs_ok ? " (absolutes within 5%)" : " (trend only)");
  return o;
}

Outcome criterion4() {
  Outcome o;
  sc::SlimConvConfig cfg;
  cfg.channels = 64;
  auto u = sc::SlimConvUnit<float>::create(cfg, 1);
  sc::Tape<float> tape(sc::TapeOptions{.record = false});
  sc::ParamBinding<float> p(tape, u.params, false);
  const auto y = sc::slimconv_forward(p, tape.constant(sc::uniform_tensor<float>(sc::Shape{2, 64, 56, 56}, 1)),
                                      cfg, sc::Mode::Train);
  o.pass = y.shape() == sc::Shape{2, 48, 56, 56};
  o.detail = "C=64 k=4/3: 2x64x56x56 -> " + y.shape().str();

  std::mt19937_64 rng(4);
  std::size_t cases = 0;
  for (int i = 0; i < 25; ++i) {
    sc::SlimConvConfig c;
    c.channels = 4 * (1 + rng() % 64);
    c.se = sc::SeRule::max_rule(32, 4);
    auto unit = sc::SlimConvUnit<float>::create(c, i);
    sc::Tape<float> t(sc::TapeOptions{.record = false});
    sc::ParamBinding<float> b(t, unit.params, false);
    const auto out = sc::slimconv_forward(
        b, t.constant(sc::uniform_tensor<float>(sc::Shape{2, c.channels, 5, 5}, i)), c, sc::Mode::Train);
    const bool ok = out.shape() == sc::Shape{2, 3 * c.channels / 4, 5, 5} && sc::pathway_widths(c).c_out == 3 * c.channels / 4;
    if (!ok) o.detail += "; C=" + std::to_string(c.channels) + " gave " + out.shape().str();
    o.pass = o.pass && ok;
    ++cases;
  }
  o.detail += "; " + std::to_string(cases) + " random C (multiples of 4) give 3C/4";
  return o;
}

Outcome criterion5() {
  Clock clock;
  const auto b = sc::bottleneck_spec_from_json(sc::read_json_file(kSpecs / "sc-bottleneck.json"));
  const auto g = sc::bottleneck_graph(b);
  Outcome o;
  double worst = 0.0;
  std::size_t skipped = 0, checked = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto r = sc::gradcheck_graph(g, b.input, seed, 1e-4);
    o.pass = o.pass && r.passed(1e-4) && r.skipped_kinks * 20 < r.checked;
    worst = std::max(worst, r.finite ? r.max_rel_error : INFINITY);
    skipped += r.skipped_kinks;
    checked += r.checked;
  }
  const double secs = clock.seconds();
  o.pass = o.pass && secs < 60.0;
  o.detail = "Sc-bottleneck 32-16-32/s2 on " + b.input.str() + ", 10 seeds, float64, step 1e-4: max rel error " + fmt("%.2e", worst) + ", " +
             std::to_string(skipped) + "/" + std::to_string(checked) + " coordinates at ReLU/max-pool kinks, " +
             fmt("%.1fs", secs);
  return o;
}

Outcome criterion6() {
  Outcome o;
  auto check = [&](const char* name, bool ok) {
    o.pass = o.pass && ok;
    o.detail += std::string(name) + (ok ? " ok; " : " FAILED; ");
  };
  sc::Tape<double> tape(sc::TapeOptions{.record = false});

  bool flip = true, split = true, cat = true, grouped = true;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const std::size_t c = 2 * (1 + seed);
    const auto x = sc::uniform_tensor(sc::Shape{2, c, 4, 3}, seed);
    const auto y = sc::uniform_tensor(sc::Shape{2, c, 4, 3}, seed + 100);
    flip = flip && sc::ops::flip_channels_value(sc::ops::flip_channels_value(x)) == x;

    const double a = 0.5 * seed, b = 1.0 - seed;
    sc::Tensor<double> combo(x.shape());
    for (std::size_t i = 0; i < combo.numel(); ++i) combo[i] = a * x[i] + b * y[i];
    auto ss = [&](const sc::Tensor<double>& t) { return sc::ops::split_sum(tape, tape.constant(t)).value(); };
    const auto fx = ss(x), fy = ss(y), fc = ss(combo);
    for (std::size_t i = 0; i < fc.numel(); ++i) split = split && std::abs(fc[i] - (a * fx[i] + b * fy[i])) < 1e-12;

    const auto [lo, hi] = sc::ops::split_channels(tape, tape.constant(x), 1 + seed % (c - 1));
    cat = cat && sc::ops::concat_channels(tape, lo, hi).value() == x;

    const std::size_t groups = 1 + seed % 4, cin = 1 + seed % 3, cout = 2;
    const auto gx = sc::uniform_tensor(sc::Shape{2, groups * cin, 6, 5}, seed + 200);
    const auto w = sc::uniform_tensor(sc::Shape{groups * cout, cin, 3, 3}, seed + 300);
    const sc::kernels::ConvGeometry geo{1 + seed % 2, 1, groups};
    const auto full = sc::kernels::conv2d_forward(gx, w, nullptr, geo);
    sc::Var<double> joined;
    for (std::size_t gi = 0; gi < groups; ++gi) {
      sc::Tensor<double> ws(sc::Shape{cout, cin, 3, 3});
      std::copy_n(w.data() + gi * ws.numel(), ws.numel(), ws.data());
      const auto part = sc::ops::conv2d(tape, sc::ops::slice_channels(tape, tape.constant(gx), gi * cin, cin),
                                        tape.constant(ws), nullptr, sc::kernels::ConvGeometry{geo.stride, geo.padding, 1});
      joined = gi == 0 ? part : sc::ops::concat_channels(tape, joined, part);
    }
    for (std::size_t i = 0; i < full.numel(); ++i) grouped = grouped && std::abs(full[i] - joined.value()[i]) < 1e-12;
  }
  check("flip involution", flip);
  check("split-sum linearity", split);
  check("concat round-trip", cat);
  check("grouped-conv slice equivalence", grouped);

  bool flip_cost = true;
  std::size_t executable = 0;
  bool counts = true;
  for (const auto& f : fs::directory_iterator(kSpecs)) {
    const auto j = sc::read_json_file(f.path());
    if (!j.contains("family")) continue;  // unit, bottleneck and training configs
    const auto s = sc::model_spec_from_json(j);
    if (s.variant == sc::Variant::Slim) {
      const auto base = sc::model_cost(s);
      for (sc::FlipMode m : {sc::FlipMode::SharedNoFlip, sc::FlipMode::FlipBoth}) {
        auto other = s;
        other.flip_mode = m;
        const auto c = sc::model_cost(other);
        flip_cost = flip_cost && c.total_params == base.total_params && c.total_flops == base.total_flops;
      }
    }
    if (!s.executable()) continue;
    ++executable;
    const auto m = sc::Model<float>::create(s, 1);
    counts = counts && m.params.parameter_count() == sc::model_cost(s).total_params;
  }
  check("flip-mode cost equality", flip_cost);
  check(("enumerated == analytic params on " + std::to_string(executable) + " executable specs").c_str(),
        counts && executable > 0);
  return o;
}

Outcome criterion7() {
  Clock clock;
  Outcome o;
  const auto base = sc::load_model_spec(kSpecs / "sc-mini-resnet.json");
  const auto cfg = sc::train_config_from_json(sc::read_json_file(kSpecs / "train-sc-mini-resnet.json"));
  const auto data = sc::make_synthetic(cfg.dataset);
  for (sc::FlipMode mode : {sc::FlipMode::FlipBottom, sc::FlipMode::SharedNoFlip, sc::FlipMode::FlipBoth}) {
    auto spec = base;
    spec.flip_mode = mode;
    auto m = sc::Model<float>::create(spec, cfg.seed);
    const auto r = sc::train(m, data, cfg);
    const auto& last = r.last();
    o.detail += std::string(sc::to_string(mode)) + " acc " + fmt("%.4f", last.accuracy) + " after " +
                std::to_string(r.history.size()) + " epochs (" + fmt("%.0fs", r.seconds) + "); ";
    if (mode == sc::FlipMode::FlipBottom) {
      o.pass = o.pass && last.accuracy >= 0.95 && r.history.size() <= 30;
      auto again = sc::Model<float>::create(spec, cfg.seed);
      const auto r2 = sc::train(again, data, cfg);
      const bool same = r2.last().loss == last.loss && r2.history.size() == r.history.size();
      o.pass = o.pass && same;
      o.detail += std::string("rerun ") + (same ? "bit-identical" : "DIFFERS") + "; ";
    }
  }
  const double secs = clock.seconds();
  o.pass = o.pass && secs < 15 * 60;
  o.detail += fmt("total %.0fs", secs);
  return o;
}

Outcome criterion8() {
  Outcome o;
  auto check = [&](const std::string& name, bool ok) {
    o.pass = o.pass && ok;
    o.detail += name + (ok ? " ok; " : " FAILED; ");
  };
  const sc::Tensor<float> constant(sc::Shape{1, 4, 8, 8}, 2.5f);
  check("constant map 0 bits", sc::shannon_entropy<float>(constant.span()) == 0.0);
  sc::Tensor<float> uniform(sc::Shape{1, 1, 16, 16});
  for (std::size_t i = 0; i < 256; ++i) uniform[i] = static_cast<float>(i);
  const double h = sc::shannon_entropy<float>(uniform.span(), 256);
  check("uniform 256 bins = " + fmt("%.6f", h) + " bits", h == 8.0);

  auto m = sc::Model<float>::create(sc::load_model_spec(kSpecs / "sc-mini-resnet.json"), 3);
  for (auto& e : m.params.entries()) {
    if (e.name.ends_with("se.fc2.weight") || e.name.ends_with("se.fc2.bias")) {
      for (std::size_t i = 0; i < e.value.numel(); ++i) e.value[i] = 0.0f;
    }
  }
  const auto p = sc::weight_profile(m, sc::uniform_tensor<float>(sc::Shape{4, 3, 32, 32}, 5), 0.01);
  bool half = !p.units.empty(), unsaturated = true;
  for (const auto& u : p.units) {
    for (double w : u.w) half = half && w == 0.5;
    unsaturated = unsaturated && u.frac_low == 0.0 && u.frac_high == 0.0;
  }
  check("zeroed fc2: w == 0.5 in " + std::to_string(p.units.size()) + " units", half);
  check("zero saturation", unsaturated);
  const auto s = sc::prunable_savings(m.graph, p, 0.01);
  check("prunable savings 0", s.params == 0 && s.flops == 0);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"Parameter reproduction", criterion1},   {"FLOPs reproduction", criterion2},
      {"Compressibility trend", criterion3},    {"Shape contract", criterion4},
      {"Gradient correctness", criterion5},     {"Structural invariants", criterion6},
      {"Toy learning smoke test", criterion7},  {"Diagnostics sanity", criterion8},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail << "\n"
              << std::flush;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
