#pragma once

// Central-difference verification of tape gradients.

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tdt/tensor.hpp"

namespace tdt::ad {

struct CheckedLoss {
  Tensor loss;
  // Signed arguments of every hinge in the graph. A coordinate is skipped when
  // any of them sits within the kink guard or changes sign under the probe.
  std::vector<double> kink_args;
};

using LossFn = std::function<CheckedLoss()>;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // Lower bound on the relative-error denominator.
  double denom_floor = 1e-5;
  double kink_guard = 1e-6;
};

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

double relative_error(double analytic, double numeric, double denom_floor);

// Builds the graph once under a fresh tape to obtain analytic gradients, then
// probes sampled coordinates of each parameter with (f(θ+h) - f(θ-h)) / 2h.
// Parameters are restored exactly after each probe. Throws NumericError when
// the loss is non-finite, naming the parameter and coordinate.
GradCheckReport grad_check(const LossFn& loss_fn, std::vector<NamedTensor> params, const GradCheckOptions& opts = {});

}  // namespace tdt::ad
