#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "slimconv/gradcheck.hpp"
#include "slimconv/params.hpp"

namespace slimconv {

template <typename T>
Tensor<T> projection_weights(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  Tensor<T> r(s);
  for (std::size_t i = 0; i < r.numel(); ++i) r[i] = static_cast<T>(dist(rng));
  return r;
}

// Finite-difference check of every trainable tensor a forward pass touches,
// plus the input itself. `forward(binding, x)` returns the output; the loss
// is sum(r * (y - y0)) with fixed random weights r and the unperturbed output
// y0. Centering keeps the loss near zero so its summation adds no rounding
// noise to the differences.
template <typename Forward>
GradCheckResult check_store_gradients(ParamStore<double>& store, Tensor<double> input, Forward&& forward,
                                      double step = 1e-4, std::uint64_t seed = 99) {
  std::vector<std::string> names;
  std::vector<Tensor<double>> analytic;
  Tensor<double> input_grad, baseline;
  {
    Tape<double> tape;
    ParamBinding<double> binding(tape, store, true);
    Var<double> x = tape.parameter(input);
    Var<double> y = forward(binding, x);
    baseline = y.value();
    tape.backward(ops::sum(tape, ops::mul(tape, y, tape.constant(projection_weights<double>(y.shape(), seed)))));
    input_grad = tape.grad(x);
    for (const auto& name : binding.order()) {
      const Var<double>& v = binding.var(name);
      if (!v.requires_grad()) continue;
      names.push_back(name);
      analytic.push_back(tape.grad(v));
    }
  }
  Tensor<double> neg_baseline = baseline;
  for (std::size_t i = 0; i < neg_baseline.numel(); ++i) neg_baseline[i] = -neg_baseline[i];
  const Tensor<double> r = projection_weights<double>(baseline.shape(), seed);

  std::vector<std::size_t> branches;
  auto eval = [&] {
    branches.clear();
    Tape<double> tape(TapeOptions{.threads = 1, .record = false, .branch_log = &branches});
    ParamBinding<double> binding(tape, store, false);
    Var<double> y = forward(binding, tape.constant(input));
    return ops::sum(tape, ops::mul(tape, ops::add(tape, y, tape.constant(neg_baseline)), tape.constant(r))).value()[0];
  };
  std::vector<GradCheckParam> params;
  params.push_back({"input", input.span(), input_grad.span()});
  for (std::size_t i = 0; i < names.size(); ++i) {
    params.push_back({names[i], store.at(names[i]).span(), analytic[i].span()});
  }
  return finite_diff_check(eval, std::span<GradCheckParam>(params), step, [&] { return branches; });
}

// sum(y * r) with r drawn from U(0.5, 1.5): a scalar that gives every output
// element a distinct upstream gradient.
template <typename T>
Var<T> random_projection(Tape<T>& tape, const Var<T>& y, std::uint64_t seed = 99) {
  return ops::sum(tape, ops::mul(tape, y, tape.constant(projection_weights<T>(y.shape(), seed))));
}

}  // namespace slimconv
