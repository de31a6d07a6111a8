#include "pmss/numerics/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace pmss {

Sgd::Sgd(double lr, double momentum, double weight_decay)
    : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  if (!(lr >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
}

void Sgd::step(std::span<Tensor> params) {
  std::vector<double> ones(params.size(), 1.0);
  step(params, ones);
}

void Sgd::step(std::span<Tensor> params, std::span<const double> lr_multipliers) {
  if (lr_multipliers.size() != params.size()) throw std::invalid_argument("one lr multiplier per parameter");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].has_grad())
      throw std::invalid_argument("parameter " + std::to_string(i) + " " + shape_str(params[i].shape()) +
                                  " has no gradient");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto& v = velocity_[p.impl()];
    if (v.empty()) v.assign(p.numel(), 0.0);
    auto data = p.data();
    auto grad = p.grad();
    const double rate = lr_ * lr_multipliers[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      v[j] = momentum_ * v[j] + grad[j] + weight_decay_ * data[j];
      data[j] -= rate * v[j];
    }
    p.clear_grad();
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const Tensor& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (const Tensor& p : params)
      if (p.has_grad())
        for (double& g : p.grad_buffer()) g *= f;
  }
  return norm;
}

}  // namespace pmss
