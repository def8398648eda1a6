#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "slimconv/gradcheck.hpp"
#include "slimconv/ops.hpp"
#include "slimconv/store_gradcheck.hpp"

namespace slimconv::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

// Builds a scalar loss from the given leaf variables.
using LossBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Analytic gradients of `build` w.r.t. every input versus central finite
// differences.
inline GradCheckResult check_op_gradients(std::vector<Tensor<double>> inputs, const LossBuilder& build,
                                          double step = 1e-4) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  Var<double> loss = build(tape, vars);
  tape.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (const auto& v : vars) analytic.push_back(tape.grad(v));

  auto eval = [&] {
    Tape<double> t2(TapeOptions{.threads = 1, .record = false});
    std::vector<Var<double>> vs;
    for (const auto& in : inputs) vs.push_back(t2.parameter(in));
    return build(t2, vs).value()[0];
  };
  std::vector<GradCheckParam> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    params.push_back({"input" + std::to_string(i), inputs[i].span(), analytic[i].span()});
  }
  return finite_diff_check(eval, std::span<GradCheckParam>(params), step);
}

}  // namespace slimconv::testing
