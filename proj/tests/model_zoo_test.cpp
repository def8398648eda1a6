#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "slimconv/cost_model.hpp"
#include "slimconv/executor.hpp"
#include "slimconv/model_zoo.hpp"
#include "test_util.hpp"

namespace sc = slimconv;
using sc::testing::random_tensor;

namespace {

const std::filesystem::path kSpecs = SLIMCONV_SPECS_DIR;

std::map<std::string, std::uint64_t> conv_params(const sc::ModelGraph& g) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& n : g.nodes()) {
    if (n.kind == sc::LayerKind::Conv) out[n.name] = sc::layer_cost(n, g.node(n.inputs[0]).out).params;
  }
  return out;
}

sc::BottleneckSpec block(std::size_t in, std::size_t width, std::size_t out, std::size_t stride, sc::Variant v,
                         sc::Rational k = {4, 3}) {
  sc::BottleneckSpec b;
  b.in_channels = in;
  b.width = width;
  b.out_channels = out;
  b.stride = stride;
  b.variant = v;
  b.unit.k = k;
  b.unit.se = sc::SeRule::max_rule(32, 4);
  b.input = sc::Shape{2, in, 8, 8};
  return b;
}

template <typename T>
sc::ParamStore<T> params_for(const sc::ModelGraph& g, std::uint64_t seed) {
  sc::ParamStore<T> store;
  sc::declare_params(g, store);
  store.initialize(seed);
  return store;
}

// Gives BN affine terms and fc2 biases non-trivial values so gradients are
// not structurally zero.
void perturb(sc::ParamStore<double>& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  for (auto& e : store.entries()) {
    if (e.buffer || e.init == sc::Init::FanOutNormal || e.init == sc::Init::SmallNormal) continue;
    for (std::size_t i = 0; i < e.value.numel(); ++i) e.value[i] += d(rng);
  }
}

std::vector<std::filesystem::path> bundled_model_specs() {
  std::vector<std::filesystem::path> out;
  for (const auto& f : std::filesystem::directory_iterator(kSpecs)) {
    if (f.path().extension() != ".json") continue;
    const auto j = sc::read_json_file(f.path());
    if (j.contains("family")) out.push_back(f.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Bottleneck, PlainConvParamsAreClosedForm) {
  const auto g = sc::bottleneck_graph(block(256, 64, 256, 1, sc::Variant::Plain));
  const auto p = conv_params(g);
  EXPECT_EQ(p.at("block.conv1"), 256u * 64);
  EXPECT_EQ(p.at("block.conv2"), 9u * 64 * 64);
  EXPECT_EQ(p.at("block.conv3"), 64u * 256);
  EXPECT_EQ(p.count("block.downsample.conv"), 0u);

  const auto g2 = sc::bottleneck_graph(block(64, 64, 256, 1, sc::Variant::Plain));
  const auto p2 = conv_params(g2);
  EXPECT_EQ(p2.at("block.conv1") + p2.at("block.conv2") + p2.at("block.conv3"), 64u * 64 + 9u * 64 * 64 + 64u * 256);
  EXPECT_EQ(p2.at("block.downsample.conv"), 64u * 256);
}

TEST(Bottleneck, SlimLastConvTakesReducedChannels) {
  const auto g = sc::bottleneck_graph(block(256, 64, 256, 1, sc::Variant::Slim));
  for (const auto& n : g.nodes()) {
    if (n.name == "block.conv3") {
      EXPECT_EQ(n.in_channels, 48u);
    }
  }
  EXPECT_EQ(g.units().size(), 1u);
}

TEST(Bottleneck, PlainAndSlimShapesMatch) {
  for (auto [in, width, out, stride] : {std::tuple{64, 64, 256, 1}, std::tuple{256, 128, 512, 2},
                                        std::tuple{32, 16, 64, 2}, std::tuple{128, 32, 128, 1}}) {
    const auto a = sc::bottleneck_graph(block(in, width, out, stride, sc::Variant::Plain));
    const auto b = sc::bottleneck_graph(block(in, width, out, stride, sc::Variant::Slim));
    EXPECT_EQ(a.output_shape(), b.output_shape());
    EXPECT_EQ(a.output_shape().c, static_cast<std::size_t>(out));
  }
}

TEST(Bottleneck, SlimIsStrictlyCheaper) {
  for (sc::Rational k : {sc::Rational{4, 3}, sc::Rational{2, 1}, sc::Rational{8, 3}}) {
    for (auto [in, width, out, stride] : {std::tuple{64, 64, 256, 1}, std::tuple{512, 128, 512, 2},
                                          std::tuple{1024, 256, 1024, 1}}) {
      const auto plain = sc::model_cost(sc::bottleneck_graph(block(in, width, out, stride, sc::Variant::Plain)));
      const auto slim = sc::model_cost(sc::bottleneck_graph(block(in, width, out, stride, sc::Variant::Slim, k)));
      EXPECT_LT(slim.total_params, plain.total_params) << k.str() << " width " << width;
      EXPECT_LT(slim.total_flops, plain.total_flops) << k.str() << " width " << width;
    }
  }
}

TEST(Graph, ChannelMismatchesAreRejected) {
  sc::ModelGraph g;
  const auto x = g.input(sc::Shape{1, 8, 4, 4});
  const auto a = g.conv(x, "a", 16, 1);
  EXPECT_THROW(g.add(x, a, "add"), sc::ConfigError);
  EXPECT_THROW(g.conv(x, "grouped", 6, 3, 1, 1, 4), sc::ConfigError);
  EXPECT_THROW(g.concat(x, g.conv(x, "s", 4, 3, 2, 1), "cat"), sc::ConfigError);
  EXPECT_THROW(g.mul_channelwise(x, g.global_avg_pool(a, "gap"), "mul"), sc::ConfigError);
  EXPECT_THROW(g.split_sum(g.conv(x, "odd", 3, 1), "split", 2), sc::ConfigError);
  sc::SlimConvConfig eight;
  eight.channels = 8;
  EXPECT_THROW(g.slimconv(a, "unit.", eight), sc::ConfigError);
  EXPECT_THROW(g.conv(x, "big", 4, 7), sc::ConfigError);
  EXPECT_THROW(g.relu(99, "dangling"), sc::ConfigError);
}

TEST(Graph, IdentityGraphPassesInputThrough) {
  sc::ModelGraph g;
  g.output(g.input(sc::Shape{1, 3, 5, 5}));
  sc::ParamStore<double> store;
  sc::Tape<double> tape;
  sc::ParamBinding<double> p(tape, store, false);
  const auto x = random_tensor(sc::Shape{2, 3, 5, 5}, 1);
  const auto y = sc::run_graph(p, g, tape.constant(x), sc::Mode::Eval);
  EXPECT_EQ(y.value().values(), x.values());
}

TEST(Graph, SlimConvSubgraphMatchesUnitForward) {
  for (sc::FlipMode fm : {sc::FlipMode::FlipBottom, sc::FlipMode::SharedNoFlip, sc::FlipMode::FlipBoth}) {
    sc::SlimConvConfig cfg;
    cfg.channels = 24;
    cfg.flip_mode = fm;
    cfg.stride = 2;
    cfg.se = sc::SeRule::max_rule(8, 2);
    sc::ModelGraph g;
    g.output(g.slimconv(g.input(sc::Shape{1, 24, 7, 7}), "", cfg));
    auto store = params_for<double>(g, 3);
    perturb(store, 4);

    sc::ParamStore<double> unit_store;
    sc::add_slimconv_params(unit_store, cfg, "");
    ASSERT_EQ(unit_store.size(), store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      EXPECT_EQ(store.entries()[i].name, unit_store.entries()[i].name);
      EXPECT_EQ(store.entries()[i].value.shape(), unit_store.entries()[i].value.shape());
    }

    const auto x = random_tensor(sc::Shape{3, 24, 7, 7}, 5);
    for (sc::Mode mode : {sc::Mode::Train, sc::Mode::Eval}) {
      auto s1 = store, s2 = store;
      sc::Tape<double> t1, t2;
      sc::ParamBinding<double> p1(t1, s1, false), p2(t2, s2, false);
      const auto a = sc::run_graph(p1, g, t1.constant(x), mode).value();
      const auto b = sc::slimconv_forward(p2, t2.constant(x), cfg, mode).value();
      ASSERT_EQ(a.shape(), b.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_DOUBLE_EQ(a[i], b[i]);
    }
  }
}

TEST(Graph, ParamsDoNotDependOnSpatialSize) {
  auto spec = sc::load_model_spec(kSpecs / "sc-mini-resnet.json");
  const auto a = sc::model_cost(spec);
  spec.input = sc::Shape{1, 3, 64, 64};
  const auto b = sc::model_cost(spec);
  EXPECT_EQ(a.total_params, b.total_params);
  EXPECT_GT(b.total_flops, a.total_flops);
}

TEST(ModelSpec, ResNetDepthsAndWidths) {
  sc::ModelSpec s;
  s.depth = 50;
  EXPECT_EQ(s.stage_blocks(), (std::vector<std::size_t>{3, 4, 6, 3}));
  EXPECT_EQ(s.stage_outputs(), (std::vector<std::size_t>{256, 512, 1024, 2048}));
  s.depth = 101;
  EXPECT_EQ(s.stage_blocks(), (std::vector<std::size_t>{3, 4, 23, 3}));
  s.depth = 34;
  EXPECT_THROW(s.stage_blocks(), sc::ConfigError);
  s.depth = 50;
  s.family = sc::Family::ResNeXt;
  EXPECT_EQ(s.stage_widths(), (std::vector<std::size_t>{128, 256, 512, 1024}));
  EXPECT_EQ(s.stage_outputs(), (std::vector<std::size_t>{256, 512, 1024, 2048}));
}

TEST(ModelSpec, BundledSpecsRoundTrip) {
  const auto files = bundled_model_specs();
  ASSERT_GE(files.size(), 14u);
  for (const auto& f : files) {
    const auto s = sc::load_model_spec(f);
    const auto back = sc::model_spec_from_json(sc::to_json(s));
    EXPECT_EQ(s, back) << f;
    const auto a = sc::model_cost(s), b = sc::model_cost(back);
    EXPECT_EQ(a.total_params, b.total_params) << f;
    EXPECT_EQ(a.total_flops, b.total_flops) << f;
  }
}

TEST(ModelSpec, ErrorsCarryJsonPointers) {
  auto base = sc::read_json_file(kSpecs / "sc-resnet50.json");
  auto pointer_of = [](const nlohmann::json& j) -> std::string {
    try {
      sc::model_spec_from_json(j);
    } catch (const sc::SpecError& e) {
      return e.pointer();
    }
    return "";
  };
  auto with = [&](const char* key, nlohmann::json v) {
    auto j = base;
    j[key] = std::move(v);
    return j;
  };
  EXPECT_EQ(pointer_of(with("widht", 3)), "/widht");
  EXPECT_EQ(pointer_of(with("variant", "thin")), "/variant");
  EXPECT_EQ(pointer_of(with("depth", 34)), "/depth");
  EXPECT_EQ(pointer_of(with("k", "4/0")), "/k");
  EXPECT_EQ(pointer_of(with("input_shape", {1, 3, 224})), "/input_shape");
  EXPECT_EQ(pointer_of(with("input_shape", {1, 3, -2, 224})), "/input_shape/2");
  EXPECT_EQ(pointer_of(with("se_rule", {{"kind", "fixed_ratio"}, {"r", 0}})), "/se_rule/r");
  EXPECT_EQ(pointer_of(with("classes", 0)), "/classes");
  EXPECT_EQ(pointer_of(nlohmann::json::array()), "/");
  auto j = base;
  j.erase("family");
  EXPECT_EQ(pointer_of(j), "/family");
}

TEST(Model, ConfigOnlyFamiliesAreNotExecutable) {
  for (const char* f : {"resnext50-32x4d.json", "se-resnet50.json", "sc-resnext101-32x3d-k2.json"}) {
    const auto s = sc::load_model_spec(kSpecs / f);
    EXPECT_FALSE(s.executable());
    EXPECT_THROW(sc::Model<float>::create(s, 1), sc::UsageError) << f;
    const auto g = sc::build_graph(s);
    sc::ParamStore<float> store;
    sc::Tape<float> tape;
    sc::ParamBinding<float> p(tape, store, false);
    EXPECT_THROW(sc::run_graph(p, g, tape.constant(sc::Tensor<float>(sc::Shape{1, 3, 224, 224})), sc::Mode::Eval),
                 sc::UsageError);
  }
}

TEST(Model, StoredParamsEqualAnalyticCount) {
  for (const auto& f : bundled_model_specs()) {
    const auto s = sc::load_model_spec(f);
    if (!s.executable()) continue;
    const auto m = sc::Model<float>::create(s, 1);
    EXPECT_EQ(m.params.parameter_count(), sc::model_cost(s).total_params) << f;
  }
}

TEST(Model, MiniResNetForwardShape) {
  const auto s = sc::load_model_spec(kSpecs / "sc-mini-resnet.json");
  auto m = sc::Model<float>::create(s, 7);
  sc::Tape<float> tape(sc::TapeOptions{.record = false});
  const auto y = sc::forward(tape, m, random_tensor<float>(sc::Shape{3, 3, 32, 32}, 2), sc::Mode::Eval);
  EXPECT_EQ(y.shape(), (sc::Shape{3, 10, 1, 1}));

  auto plain_spec = s;
  plain_spec.variant = sc::Variant::Plain;
  EXPECT_LT(sc::model_cost(s).total_params, sc::model_cost(plain_spec).total_params);
}

TEST(Model, ShapeMismatchIsContractViolation) {
  auto m = sc::Model<float>::create(sc::load_model_spec(kSpecs / "sc-mini-resnet.json"), 7);
  sc::Tape<float> tape;
  EXPECT_THROW(sc::forward(tape, m, sc::Tensor<float>(sc::Shape{1, 3, 28, 28}), sc::Mode::Eval),
               sc::ContractViolation);
  EXPECT_THROW(sc::forward(tape, m, sc::Tensor<float>(sc::Shape{1, 1, 32, 32}), sc::Mode::Eval),
               sc::ContractViolation);
}

TEST(Model, EvalForwardIsBitIdentical) {
  auto m = sc::Model<float>::create(sc::load_model_spec(kSpecs / "sc-mini-resnet.json"), 11);
  const auto x = random_tensor<float>(sc::Shape{4, 3, 32, 32}, 3);
  sc::Tape<float> t1, t2;
  const auto a = sc::forward(t1, m, x, sc::Mode::Eval).value();
  const auto b = sc::forward(t2, m, x, sc::Mode::Eval).value();
  EXPECT_EQ(a.values(), b.values());
}

TEST(Model, TrainForwardUpdatesRunningStats) {
  auto m = sc::Model<double>::create(sc::load_model_spec(kSpecs / "sc-mini-resnet.json"), 11);
  const auto x = random_tensor<double>(sc::Shape{4, 3, 32, 32}, 3);
  const auto mean0 = m.params.at("stem.bn.running_mean");
  const auto var0 = m.params.at("stem.bn.running_var");
  sc::Tensor<double> conv_out;
  sc::Tape<double> tape;
  sc::forward(tape, m, x, sc::Mode::Train, sc::Capture<double>([&](const sc::LayerNode& n, const sc::Var<double>& v) {
    if (n.name == "stem.conv") conv_out = v.value();
  }));
  const auto& s = conv_out.shape();
  const double count = static_cast<double>(s.n * s.h * s.w);
  const auto& mean1 = m.params.at("stem.bn.running_mean");
  const auto& var1 = m.params.at("stem.bn.running_var");
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t i = 0; i < s.h * s.w; ++i) sum += conv_out[(n * s.c + c) * s.h * s.w + i];
    const double mu = sum / count;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t i = 0; i < s.h * s.w; ++i) {
        const double d = conv_out[(n * s.c + c) * s.h * s.w + i] - mu;
        sq += d * d;
      }
    const double unbiased = sq / (count - 1);
    EXPECT_NEAR(mean1[c], 0.9 * mean0[c] + 0.1 * mu, 1e-12);
    EXPECT_NEAR(var1[c], 0.9 * var0[c] + 0.1 * unbiased, 1e-12);
    // Each update moves the running value toward the batch statistic.
    EXPECT_LE(std::abs(mean1[c] - mu), std::abs(mean0[c] - mu) + 1e-15);
  }
}

TEST(Model, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "slimconv_model_rt";
  std::filesystem::remove_all(dir);
  auto m = sc::Model<float>::create(sc::load_model_spec(kSpecs / "sc-mini-resnet.json"), 5);
  m.save(dir);
  auto back = sc::Model<float>::load(dir);
  EXPECT_EQ(back.spec, m.spec);
  ASSERT_EQ(back.params.size(), m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_EQ(back.params.entries()[i].value.values(), m.params.entries()[i].value.values());
  }
  std::filesystem::remove_all(dir);
}

TEST(Gradients, SlimBottleneckMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto b = block(32, 16, 32, 2, sc::Variant::Slim);
    b.unit.se = sc::SeRule::max_rule(4, 2);
    b.input = sc::Shape{4, 32, 6, 6};
    const auto g = sc::bottleneck_graph(b);
    auto store = params_for<double>(g, seed);
    perturb(store, seed + 100);
    const auto x = random_tensor(b.input, seed + 200);
    const auto r = sc::check_store_gradients(store, x, [&](sc::ParamBinding<double>& p, const sc::Var<double>& in) {
      return sc::run_graph(p, g, in, sc::Mode::Train);
    }, 1e-4, seed);
    EXPECT_TRUE(r.passed(1e-4)) << "seed " << seed << ": " << r.max_rel_error << " at " << r.worst_param << "["
                                << r.worst_index << "]";
    EXPECT_LT(r.skipped_kinks * 20, r.checked) << "seed " << seed;
  }
}
