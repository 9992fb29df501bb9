#include "lightclip/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "lightclip/errors.hpp"

namespace lightclip {

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                           const GradCheckOptions& options) {
  std::vector<bool> previous_flags;
  for (auto& leaf : leaves) {
    previous_flags.push_back(leaf.requires_grad());
    leaf.set_requires_grad(true);
    leaf.storage()->grad.clear();
  }

  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = f();
  }
  tape.backward(loss);

  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    const std::size_t stride =
        options.max_coords_per_tensor == 0
            ? 1
            : std::max<std::size_t>(1, leaf.numel() / options.max_coords_per_tensor);
    for (std::size_t i = 0; i < leaf.numel(); i += stride) {
      double& slot = leaf.mutable_data()[i];
      const double original = slot;
      double plus, minus;
      {
        NoGradScope no_grad;
        slot = original + options.step;
        plus = f().item();
        slot = original - options.step;
        minus = f().item();
      }
      slot = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
      ++report.checked;
    }
  }
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    leaves[li].storage()->grad.clear();
    leaves[li].set_requires_grad(previous_flags[li]);
  }
  report.passed = std::isfinite(report.max_rel_error) && report.max_rel_error <= options.tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step, double tol) {
  Tensor leaf = x.detach();
  GradCheckOptions options;
  options.step = step;
  options.tol = tol;
  return grad_check([&] { return f(leaf); }, {leaf}, options);
}

}  // namespace lightclip
