#include "pmss/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace pmss {

GradcheckReport gradcheck(const std::function<Tensor()>& fn, std::vector<NamedTensor> inputs, double eps,
                          double rel_tol, const std::function<void(Tape&)>& tape_setup) {
  constexpr double kAbsFloor = 1e-6;
  std::vector<bool> flags;
  for (auto& in : inputs) flags.push_back(in.tensor.requires_grad());
  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.clear_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    if (tape_setup) tape_setup(tape);
    GradScope scope(tape);
    Tensor loss = fn();
    tape.backward(loss);
  }
  for (auto& in : inputs) {
    analytic.emplace_back(in.tensor.numel(), 0.0);
    if (in.tensor.has_grad()) std::copy(in.tensor.grad().begin(), in.tensor.grad().end(), analytic.back().begin());
    in.tensor.clear_grad();
  }

  GradcheckReport report;
  report.rel_tol = rel_tol;
  NoGradScope no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].tensor.data();
    GradcheckEntry entry{inputs[k].name, data.size(), 0.0, 0.0};
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double plus = fn().item();
      data[i] = saved - eps;
      const double minus = fn().item();
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), kAbsFloor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) inputs[k].tensor.set_requires_grad(flags[k]);
  report.passed = report.max_rel_error < rel_tol;
  return report;
}

}  // namespace pmss
