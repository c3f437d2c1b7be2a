#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sarnet/tensor.hpp"

namespace sarnet {

struct GradCheckOptions {
  double step = 1e-4;
  double rel_tol = 1e-4;
  /// Coordinates probed per input; -1 probes every coordinate.
  Index max_coords_per_input = -1;
  std::uint64_t seed = 7;
  /// Multiplies the analytic gradient before comparison. Only the negative
  /// control sets this to something other than 1.
  double analytic_scale = 1.0;
  /// Extra tries at step/10, step/100, ... when the coarser step disagrees.
  /// A step that straddles a ReLU or clamp kink gives a wrong central
  /// difference; a finer step no longer straddles it. 0 disables refinement.
  int refinements = 2;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  Index coords_checked = 0;
  /// Coordinates that only agreed after refining the step.
  Index coords_refined = 0;
  /// "input i, coordinate j" of the worst disagreement.
  std::string worst;
};

using ScalarClosure = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Central-difference check of reverse-mode gradients in double precision.
///
/// Every input is marked as requiring grad; `fn` must return a (1,1,1,1)
/// tensor. Relative error per coordinate is |a - n| / max(|a|, |n|, floor),
/// where floor = 10 eps |f| / (h rel_tol) is the gradient size below which
/// roundoff in f alone would exceed the tolerance. The check passes iff the
/// maximum stays within rel_tol. Inputs may share
/// storage with module parameters, in which case perturbations reach the module.
GradCheckReport grad_check(const ScalarClosure& fn, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& opt = {});

}  // namespace sarnet
