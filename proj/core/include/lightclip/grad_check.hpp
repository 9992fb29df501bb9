#pragma once

#include <functional>
#include <vector>

#include "lightclip/tensor.hpp"

namespace lightclip {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-6;
  double tol = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // vanishing gradient entries from turning rounding noise into failures.
  double floor = 1e-4;
  // Check at most this many coordinates per tensor (evenly strided); 0 = all.
  std::size_t max_coords_per_tensor = 0;
};

/// Compares the taped gradient of scalar `f(x)` with central differences.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step = 1e-6, double tol = 1e-5);

/// Same comparison for a closure over leaf tensors. Each leaf is perturbed
/// in place and restored; their existing grads are cleared.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                           const GradCheckOptions& options = {});

}  // namespace lightclip
