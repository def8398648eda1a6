#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include "slimconv/diagnostics.hpp"
#include "test_util.hpp"

namespace sc = slimconv;
using sc::testing::random_tensor;

namespace {

const std::filesystem::path kSpecs = SLIMCONV_SPECS_DIR;

// Histogram by explicit bin edges instead of a scaled index.
double entropy_oracle(const std::vector<double>& v, std::size_t bins) {
  const double lo = *std::min_element(v.begin(), v.end());
  const double hi = *std::max_element(v.begin(), v.end());
  std::vector<double> counts(bins, 0.0);
  for (double x : v) {
    std::size_t b = 0;
    while (b + 1 < bins && x >= lo + (hi - lo) * static_cast<double>(b + 1) / static_cast<double>(bins)) ++b;
    counts[b] += 1.0;
  }
  double h = 0.0;
  for (double c : counts)
    if (c > 0) h -= c / v.size() * std::log2(c / v.size());
  return h;
}

void zero_fc2(sc::ParamStore<float>& store) {
  for (auto& e : store.entries()) {
    if (e.name.ends_with("se.fc2.weight") || e.name.ends_with("se.fc2.bias")) {
      for (std::size_t i = 0; i < e.value.numel(); ++i) e.value[i] = 0.0f;
    }
  }
}

sc::ModelGraph single_unit(std::size_t c, std::size_t hw) {
  sc::SlimConvConfig cfg;
  cfg.channels = c;
  cfg.se = sc::SeRule::max_rule(32, 2);
  sc::ModelGraph g;
  g.output(g.slimconv(g.input(sc::Shape{1, c, hw, hw}), "u.", cfg));
  return g;
}

sc::WeightProfile profile_of(std::vector<double> w) {
  sc::WeightProfile p;
  p.units.push_back(sc::profile_from_weights("u.", std::move(w), 0.01));
  return p;
}

}  // namespace

TEST(Entropy, ConstantIsZeroBits) {
  std::vector<double> v(100, 3.25);
  EXPECT_EQ(sc::shannon_entropy<double>(v), 0.0);
  EXPECT_EQ(sc::shannon_entropy<double>(std::vector<double>{}), 0.0);
}

TEST(Entropy, UniformOver256BinsIsEightBits) {
  std::vector<double> v;
  for (int rep = 0; rep < 3; ++rep)
    for (int i = 0; i < 256; ++i) v.push_back(i);
  EXPECT_DOUBLE_EQ(sc::shannon_entropy<double>(v, 256), 8.0);
  EXPECT_DOUBLE_EQ(sc::shannon_entropy<double>(std::vector<double>{0, 1}, 2), 1.0);
}

TEST(Entropy, MatchesEdgeOracle) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto t = random_tensor(sc::Shape{2, 4, 9, 9}, seed, -2.0, 5.0);
    for (std::size_t bins : {2, 16, 256}) {
      EXPECT_NEAR(sc::shannon_entropy(t.span(), bins), entropy_oracle(t.values(), bins), 1e-9);
    }
  }
}

TEST(Entropy, BoundsAndInvariances) {
  auto v = random_tensor(sc::Shape{1, 1, 40, 40}, 9).values();
  const double h = sc::shannon_entropy<double>(v, 64);
  EXPECT_GE(h, 0.0);
  EXPECT_LE(h, 6.0);
  std::mt19937_64 rng(1);
  auto shuffled = v;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  EXPECT_DOUBLE_EQ(sc::shannon_entropy<double>(shuffled, 64), h);
  auto scaled = v;
  for (double& x : scaled) x = 4.0 * x - 8.0;
  EXPECT_DOUBLE_EQ(sc::shannon_entropy<double>(scaled, 64), h);
  EXPECT_THROW(sc::shannon_entropy<double>(v, 1), sc::ConfigError);
}

TEST(Entropy, PerChannelAveragesChannels) {
  sc::Tensor<double> t(sc::Shape{2, 2, 1, 2});
  // Channel 0 is constant; channel 1 holds {0, 1, 2, 3} over 4 bins.
  const double vals[] = {7, 7, 0, 1, 7, 7, 2, 3};
  for (std::size_t i = 0; i < 8; ++i) t[i] = vals[i];
  EXPECT_DOUBLE_EQ(sc::channel_entropy(t, 4), 1.0);
}

TEST(Entropy, ReportHasOneRowPerBlock) {
  auto m = sc::Model<float>::create(sc::load_model_spec(kSpecs / "sc-mini-resnet.json"), 3);
  const auto r = sc::entropy_report(m, random_tensor<float>(sc::Shape{4, 3, 32, 32}, 1));
  ASSERT_EQ(r.blocks.size(), 4u);
  EXPECT_EQ(r.blocks[0].block, "layer1.0.relu3");
  for (const auto& b : r.blocks) {
    EXPECT_GT(b.bits, 0.0);
    EXPECT_LE(b.bits, 8.0);
  }
  const auto pc = sc::entropy_report(m, random_tensor<float>(sc::Shape{4, 3, 32, 32}, 1), {256, true});
  EXPECT_EQ(sc::to_json(pc)["scope"], "per_channel");
}

TEST(WeightProfile, InjectedWeights) {
  const auto u = sc::profile_from_weights("u.", {0.001, 0.999, 0.5, 0.5}, 0.01);
  EXPECT_DOUBLE_EQ(u.frac_low, 0.25);
  EXPECT_DOUBLE_EQ(u.frac_high, 0.25);
  EXPECT_EQ(u.ones, (std::vector<std::size_t>{1}));
  EXPECT_THROW(sc::profile_from_weights("u.", {0.5}, 0.5), sc::ConfigError);
  EXPECT_THROW(sc::profile_from_weights("u.", {0.5}, 0.0), sc::ConfigError);
}

TEST(WeightProfile, ZeroedFc2GivesOneHalf) {
  auto m = sc::Model<float>::create(sc::load_model_spec(kSpecs / "sc-mini-resnet.json"), 3);
  zero_fc2(m.params);
  const auto p = sc::weight_profile(m, random_tensor<float>(sc::Shape{3, 3, 32, 32}, 2), 0.01);
  ASSERT_EQ(p.units.size(), 4u);
  EXPECT_TRUE(p.notice.empty());
  EXPECT_EQ(p.units[0].unit, "layer1.0.slim.");
  for (const auto& u : p.units) {
    EXPECT_EQ(u.frac_low, 0.0);
    EXPECT_EQ(u.frac_high, 0.0);
    EXPECT_TRUE(u.ones.empty());
    for (double w : u.w) EXPECT_EQ(w, 0.5);
  }
  const auto s = sc::prunable_savings(m.graph, p, 0.01);
  EXPECT_EQ(s.params, 0u);
  EXPECT_EQ(s.flops, 0u);
}

TEST(WeightProfile, PlainModelGivesNotice) {
  auto m = sc::Model<float>::create(sc::load_model_spec(kSpecs / "mini-resnet.json"), 3);
  const auto p = sc::weight_profile(m, random_tensor<float>(sc::Shape{1, 3, 32, 32}, 2));
  EXPECT_TRUE(p.units.empty());
  EXPECT_FALSE(p.notice.empty());
  EXPECT_TRUE(sc::to_json(p).contains("notice"));
}

TEST(Prunable, NoDeadFlipPairsSavesNothing) {
  const auto g = single_unit(8, 6);
  const auto s = sc::prunable_savings(g, profile_of({1, 1, 1, 1, 0, 0, 0, 0}), 0.01);
  EXPECT_EQ(s.units.at(0).pairs, 0u);
  EXPECT_EQ(s.params, 0u);
  EXPECT_EQ(s.flops, 0u);
}

TEST(Prunable, OneDeadPairDropsOneChannelPerPathway) {
  const auto g = single_unit(8, 6);
  const auto w = sc::pathway_widths(g.units().at(0).config);
  const auto s = sc::prunable_savings(g, profile_of({0.5, 0.5, 0, 0.5, 0.5, 0, 0.5, 0.5}), 0.01);
  EXPECT_EQ(s.units.at(0).pairs, 1u);
  EXPECT_EQ(s.params, 9 * w.c_top + w.c_bot);
  EXPECT_EQ(s.flops, (9 * w.c_top + w.c_bot) * 36);
}

TEST(Prunable, NeverExceedsTransformerCost) {
  const auto g = single_unit(16, 5);
  const auto s = sc::prunable_savings(g, profile_of(std::vector<double>(16, 0.0)), 0.01);
  std::uint64_t params = 0, flops = 0;
  for (const auto& n : g.nodes()) {
    if (n.name == "u.top.conv3" || n.name == "u.bottom.conv1") {
      const auto c = sc::layer_cost(n, g.node(n.inputs[0]).out);
      params += c.params;
      flops += c.flops;
    }
  }
  EXPECT_EQ(s.units.at(0).pairs, 8u);
  EXPECT_LE(s.params, params);
  EXPECT_LE(s.flops, flops);
}

TEST(Prunable, MismatchedProfileIsRejected) {
  const auto g = single_unit(8, 6);
  EXPECT_THROW(sc::prunable_savings(g, profile_of(std::vector<double>(6, 0.5)), 0.01), sc::ContractViolation);
  sc::WeightProfile other;
  other.units.push_back(sc::profile_from_weights("v.", std::vector<double>(8, 0.5), 0.01));
  EXPECT_THROW(sc::prunable_savings(g, other, 0.01), sc::ContractViolation);
}
