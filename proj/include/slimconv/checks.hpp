#pragma once

#include <cstdint>
#include <random>

#include "slimconv/executor.hpp"
#include "slimconv/model_zoo.hpp"
#include "slimconv/store_gradcheck.hpp"

namespace slimconv {

template <typename T = double>
Tensor<T> uniform_tensor(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

// Shifts constant-initialized parameters (BN affine terms, biases) by
// U(-0.5, 0.5) so their gradients are not structurally degenerate.
inline void perturb_constant_params(ParamStore<double>& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  for (auto& e : store.entries()) {
    if (e.buffer || e.init == Init::FanOutNormal || e.init == Init::SmallNormal) continue;
    for (std::size_t i = 0; i < e.value.numel(); ++i) e.value[i] += d(rng);
  }
}

// Train-mode finite-difference check of a whole graph in double precision
// with a random input batch. Graphs store a batch-1 input shape, so the batch
// is given explicitly; with N=1 the SE statistics collapse and BN gradients
// become ill-conditioned.
inline GradCheckResult gradcheck_graph(const ModelGraph& g, const Shape& input, std::uint64_t seed,
                                       double step = 1e-4) {
  ParamStore<double> store;
  declare_params(g, store);
  store.initialize(seed);
  perturb_constant_params(store, seed + 100);
  const Tensor<double> x = uniform_tensor(input, seed + 200);
  return check_store_gradients(
      store, x, [&](ParamBinding<double>& p, const Var<double>& in) { return run_graph(p, g, in, Mode::Train); },
      step, seed);
}

inline ModelGraph unit_graph(const SlimConvConfig& cfg, const Shape& input) {
  if (input.c != cfg.channels) throw ConfigError("unit: input_shape channels != C");
  ModelGraph g;
  g.name = "slimconv";
  g.output(g.slimconv(g.input(input), "", cfg));
  g.validate();
  return g;
}

}  // namespace slimconv
