#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pmss/numerics/tape.hpp"
#include "pmss/numerics/tensor.hpp"

namespace pmss {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradcheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  double rel_tol = 0.0;
  bool passed = false;
};

/// Compares tape gradients of the scalar fn() against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every element of every input.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6). Inputs are restored and
/// their gradients cleared on return. `tape_setup` runs on the analytic tape
/// before fn() (used to inject faulty VJPs in negative controls).
GradcheckReport gradcheck(const std::function<Tensor()>& fn, std::vector<NamedTensor> inputs, double eps,
                          double rel_tol, const std::function<void(Tape&)>& tape_setup = {});

}  // namespace pmss
