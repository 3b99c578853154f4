#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "medix/rng.hpp"
#include "medix/tensor.hpp"

namespace medix {

/// Outcome of comparing an analytic gradient against central finite
/// differences. The report carries failures; it never throws.
struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checks = 0;
  Index worst_input = -1;
  Index worst_coord = -1;

  bool passed(double tol) const { return checks > 0 && max_rel_error < tol; }
};

/// Checks d(scalar_fn)/d(inputs) against `analytic` with central differences
/// of step h. Runs at 64-bit precision. When `max_coords` is set, only that
/// many randomly chosen coordinates per input are probed (the driver for
/// whole-model checks, where exhaustive probing is pointless).
///
/// The relative error divides by max(|analytic| + |numeric|, denom_floor).
/// Central differences of a unit-scale loss carry ~eps*|L|/step of rounding
/// noise (about 1e-11 at step 1e-5), so whole-model checks should keep the
/// floor well above that; coordinates whose true gradient sits below the
/// floor are then judged by absolute error against it.
inline GradCheckReport grad_check(const std::function<double(const std::vector<Tensor<double>>&)>& scalar_fn,
                                  const std::vector<Tensor<double>>& analytic,
                                  std::vector<Tensor<double>> inputs, double step = 1e-5,
                                  std::optional<Index> max_coords = std::nullopt, std::uint64_t seed = 0,
                                  double denom_floor = 1e-8) {
  GradCheckReport report;
  Rng rng(seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Index n = inputs[i].size();
    std::vector<Index> coords;
    if (max_coords && *max_coords < n) {
      Rng pick = rng.split("coords", i);
      for (Index c = 0; c < *max_coords; ++c) coords.push_back(static_cast<Index>(pick.below(n)));
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (Index c = 0; c < n; ++c) coords[static_cast<std::size_t>(c)] = c;
    }
    for (Index c : coords) {
      const double saved = inputs[i][c];
      inputs[i][c] = saved + step;
      const double up = scalar_fn(inputs);
      inputs[i][c] = saved - step;
      const double down = scalar_fn(inputs);
      inputs[i][c] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i][c];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max(std::abs(a) + std::abs(numeric), denom_floor);
      ++report.checks;
      if (abs_err > report.max_abs_error) report.max_abs_error = abs_err;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = static_cast<Index>(i);
        report.worst_coord = c;
      }
    }
  }
  return report;
}

}  // namespace medix
