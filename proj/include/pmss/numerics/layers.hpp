#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "pmss/numerics/rng.hpp"
#include "pmss/numerics/tensor.hpp"

namespace pmss {

struct ConvOptions {
  std::size_t dilation = 1;
  std::size_t groups = 1;
  std::size_t stride = 1;
  /// Spatial zero padding; defaults to dilation * (kernel - 1) / 2 ("same").
  std::ptrdiff_t padding = -1;
  bool bias = true;
};

/// 2-D convolution parameters. weight is out x (in / groups) x k x k.
struct ConvLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor weight;
  Tensor bias;  // may be null when the layer has no bias

  /// Kaiming-uniform (fan-in) weights and zero bias. Rejects geometry where
  /// either channel count is not divisible by groups.
  static ConvLayer make(std::size_t in, std::size_t out, std::size_t kernel, const ConvOptions& opts, Rng& rng);
  /// Same geometry with all-zero weight and bias.
  static ConvLayer make_zero(std::size_t in, std::size_t out, std::size_t kernel, const ConvOptions& opts);

  bool trainable() const { return weight.requires_grad(); }
  void set_trainable(bool on);
  std::size_t param_count() const;
  std::size_t out_extent(std::size_t in_extent) const;
  void validate() const;
};

using TensorVisitor = std::function<void(const std::string& name, Tensor& t)>;

/// Visits "<prefix>.weight" and "<prefix>.bias".
void visit_conv(const std::string& prefix, ConvLayer& layer, const TensorVisitor& fn);

}  // namespace pmss
