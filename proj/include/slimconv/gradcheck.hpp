#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace slimconv {

// One parameter block exposed to the checker: the live values (perturbed in
// place and restored) and the analytic gradient to compare against.
struct GradCheckParam {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Coordinates whose +h or -h pass took a different ReLU/max-pool branch
  // than the unperturbed pass; central differences are meaningless there.
  std::size_t skipped_kinks = 0;
  bool finite = true;
  std::string nonfinite_param;
  std::size_t nonfinite_index = 0;

  bool passed(double tolerance) const { return finite && max_rel_error < tolerance; }
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Central differences (f(p+h) - f(p-h)) / 2h for every scalar of every block.
// `loss` must be deterministic and read the current values of the blocks.
// If `branches` is given it returns the branch pattern of the latest loss()
// call; coordinates whose perturbation changes that pattern are skipped and
// counted.
template <typename Loss, typename Branches = std::nullptr_t>
GradCheckResult finite_diff_check(Loss&& loss, std::span<GradCheckParam> params, double step,
                                  Branches&& branches = nullptr) {
  constexpr bool kTrackBranches = !std::is_same_v<std::decay_t<Branches>, std::nullptr_t>;
  GradCheckResult result;
  if (!(step > 0.0)) {
    result.finite = false;
    return result;
  }
  std::vector<std::size_t> base;
  if constexpr (kTrackBranches) {
    loss();
    base = branches();
  }
  for (GradCheckParam& p : params) {
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const double saved = p.values[i];
      bool same_piece = true;
      p.values[i] = saved + step;
      const double plus = loss();
      if constexpr (kTrackBranches) same_piece = branches() == base;
      p.values[i] = saved - step;
      const double minus = loss();
      if constexpr (kTrackBranches) same_piece = same_piece && branches() == base;
      p.values[i] = saved;
      ++result.checked;
      if (!std::isfinite(plus) || !std::isfinite(minus) || !std::isfinite(p.analytic[i])) {
        result.finite = false;
        result.nonfinite_param = p.name;
        result.nonfinite_index = i;
        return result;
      }
      if (!same_piece) {
        ++result.skipped_kinks;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = relative_error(p.analytic[i], numeric);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace slimconv
