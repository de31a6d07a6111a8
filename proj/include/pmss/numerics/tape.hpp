#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pmss/numerics/tensor.hpp"

namespace pmss {

/// Ordered record of differentiable operations. Operations executed while a
/// GradScope is active append themselves here; backward() replays the record
/// in exact reverse order, accumulating gradients additively into every input
/// that requires them. A tape supports a single backward pass.
class Tape {
 public:
  using Vjp = std::function<void()>;

  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    Vjp vjp;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string op, std::vector<Tensor> inputs, Tensor output, Vjp vjp);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded VJP up to and including
  /// the one that produced `loss`, newest first. Throws ShapeError when loss is
  /// not a scalar, was not produced on this tape, or the tape was already used.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  bool spent() const { return spent_; }

  /// Test fixture: scales the gradient contributions of every `op` entry by
  /// `factor`, turning a correct VJP into a wrong one.
  void corrupt_vjp(std::string op, double factor);

  /// Order in which the last backward() visited entries (indices into the tape).
  const std::vector<std::size_t>& visit_order() const { return visited_; }

  /// Tape recording in the calling thread, or nullptr.
  static Tape* current();

 private:
  friend class GradScope;
  std::vector<Entry> entries_;
  std::vector<std::size_t> visited_;
  std::optional<std::pair<std::string, double>> corruption_;
  bool spent_ = false;
};

/// Makes `tape` the recording tape of this thread for the scope's lifetime.
class GradScope {
 public:
  explicit GradScope(Tape& tape);
  ~GradScope();
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording (inference inside a training loop).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// True when a tape is active and at least one input requires a gradient.
bool tracking(std::initializer_list<const Tensor*> inputs);

}  // namespace pmss
