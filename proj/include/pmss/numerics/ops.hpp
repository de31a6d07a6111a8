#pragma once

#include <cstdint>

#include "pmss/data/label_map.hpp"
#include "pmss/numerics/layers.hpp"
#include "pmss/numerics/tensor.hpp"

/// Differentiable primitives. Every function records itself on the active
/// tape when any input requires a gradient; image-like values are N x C x H x W.
namespace pmss::ops {

Tensor conv2d(const Tensor& x, const ConvLayer& layer);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

enum class Elementwise { add, mul };
Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind);

/// Channels of a precede channels of b.
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor concat_channels(const std::vector<Tensor>& parts);
/// Channels [begin, end).
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);

/// Per-pixel softmax over the channel axis (max-shifted).
Tensor softmax_channels(const Tensor& x);

/// Bilinear resampling with the half-pixel (align_corners = false) convention.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Mean over non-ignored pixels of -log softmax(logits)[target].
Tensor cross_entropy_logits(const Tensor& logits, const LabelMap& target,
                            std::int32_t ignore_index = kDefaultIgnoreIndex);
/// Mean over non-ignored pixels of -log probs[target]; probs must be positive.
Tensor cross_entropy_probs(const Tensor& probs, const LabelMap& target,
                           std::int32_t ignore_index = kDefaultIgnoreIndex);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// y[n,c] = x[n,c] * scale[c] + shift[c]; scale and shift have shape {C}.
Tensor affine_channels(const Tensor& x, const Tensor& scale, const Tensor& shift);

/// N x C x H x W -> N x C x 1 x 1, maximum over space.
Tensor global_max_pool(const Tensor& x);
/// N x C x 1 x 1 -> N x C x H x W by copying.
Tensor expand_spatial(const Tensor& x, std::size_t h, std::size_t w);

/// Linear map across the H*W token positions of each channel:
/// y[n,c,t'] = sum_t weight[t',t] x[n,c,t] + bias[t'].
Tensor token_mix(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Detached copy for read-only use outside the tape.
Tensor detach(const Tensor& x);

}  // namespace pmss::ops
