#include "pmss/numerics/layers.hpp"

#include <cmath>
#include <numbers>

namespace pmss {

double Rng::normal() {
  // Box-Muller; discards the second variate to keep the stream stateless.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

ConvLayer geometry(std::size_t in, std::size_t out, std::size_t kernel, const ConvOptions& opts) {
  ConvLayer l;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = kernel;
  l.dilation = opts.dilation;
  l.groups = opts.groups;
  l.stride = opts.stride;
  l.padding = opts.padding >= 0 ? static_cast<std::size_t>(opts.padding) : opts.dilation * (kernel - 1) / 2;
  l.validate();
  return l;
}

}  // namespace

void ConvLayer::validate() const {
  if (in_channels == 0 || out_channels == 0 || kernel == 0 || dilation == 0 || groups == 0 || stride == 0)
    throw ShapeError("convolution extents must be positive");
  if (in_channels % groups != 0 || out_channels % groups != 0)
    throw ShapeError("channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                     " not divisible by groups " + std::to_string(groups));
}

ConvLayer ConvLayer::make(std::size_t in, std::size_t out, std::size_t kernel, const ConvOptions& opts, Rng& rng) {
  ConvLayer l = geometry(in, out, kernel, opts);
  const std::size_t fan_in = (in / l.groups) * kernel * kernel;
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> w(out * fan_in);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  l.weight = Tensor::from({out, in / l.groups, kernel, kernel}, std::move(w), true);
  if (opts.bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

ConvLayer ConvLayer::make_zero(std::size_t in, std::size_t out, std::size_t kernel, const ConvOptions& opts) {
  ConvLayer l = geometry(in, out, kernel, opts);
  l.weight = Tensor::zeros({out, in / l.groups, kernel, kernel}, true);
  if (opts.bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

void ConvLayer::set_trainable(bool on) {
  weight.set_requires_grad(on);
  if (bias) bias.set_requires_grad(on);
}

std::size_t ConvLayer::param_count() const { return weight.numel() + (bias ? bias.numel() : 0); }

std::size_t ConvLayer::out_extent(std::size_t in_extent) const {
  const std::size_t span = dilation * (kernel - 1) + 1;
  if (in_extent + 2 * padding < span) throw ShapeError("input extent smaller than the dilated kernel");
  return (in_extent + 2 * padding - span) / stride + 1;
}

void visit_conv(const std::string& prefix, ConvLayer& layer, const TensorVisitor& fn) {
  fn(prefix + ".weight", layer.weight);
  if (layer.bias) fn(prefix + ".bias", layer.bias);
}

}  // namespace pmss
