#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pmss/numerics/gradcheck.hpp"
#include "pmss/numerics/rng.hpp"

namespace pmss::framework {

enum class CheckScope { layers, spm, pipeline };

std::string to_string(CheckScope s);
/// Throws std::invalid_argument for an unknown scope.
CheckScope check_scope_from(const std::string& tag);

/// One randomized scalar function and the tensors it is checked against.
struct GradCase {
  std::string name;
  std::function<Tensor()> fn;
  std::vector<NamedTensor> inputs;
  double eps = 1e-6;
};

/// Every differentiable primitive on small random shapes.
std::vector<GradCase> primitive_cases(Rng& rng);
/// Primitives plus PDC, residual and mixer blocks.
std::vector<GradCase> layer_cases(Rng& rng);
/// Both SPM branches, a full recurrent SPM and the recognition variant.
std::vector<GradCase> spm_cases(Rng& rng);
/// A tiny prompt-matched pipeline under the total loss.
std::vector<GradCase> pipeline_cases(Rng& rng);

struct SuiteOptions {
  std::uint64_t seed = 0;
  /// Number of consecutive seeds starting at `seed`.
  std::size_t seeds = 20;
  /// Negative control: scale the VJP of this tape op by `corrupt_factor`.
  std::string corrupt_op;
  double corrupt_factor = 1.5;
};

struct SuiteCaseResult {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct SuiteReport {
  CheckScope scope = CheckScope::layers;
  double rel_tol = 0.0;
  std::vector<SuiteCaseResult> cases;
  double max_rel_error = 0.0;
  double seconds = 0.0;
  bool passed = false;
  /// Distinct names of failing cases, in order of first failure.
  std::vector<std::string> failing() const;
};

/// 1e-4 for layers and spm, 1e-3 for pipeline.
double default_rel_tol(CheckScope scope);

SuiteReport run_gradcheck_suite(CheckScope scope, const SuiteOptions& opts);

void to_json(nlohmann::json& j, const SuiteReport& r);

}  // namespace pmss::framework
