#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "pmss/numerics/tensor.hpp"

namespace pmss {

/// SGD with heavy-ball momentum:
///   v <- momentum * v + grad (+ weight_decay * p);  p <- p - lr * v
/// Gradients are cleared after every step.
class Sgd {
 public:
  Sgd(double lr, double momentum = 0.9, double weight_decay = 0.0);

  /// Rejects (std::invalid_argument) when any parameter lacks a gradient;
  /// in that case nothing is updated.
  void step(std::span<Tensor> params);
  void step(std::span<Tensor> params, std::span<const double> lr_multipliers);

  double lr() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::unordered_map<const TensorImpl*, std::vector<double>> velocity_;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm and
/// returns the norm before rescaling. Parameters without a gradient are skipped.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace pmss
