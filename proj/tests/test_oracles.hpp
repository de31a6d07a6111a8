// Independent reference implementations used only by tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pmss/numerics/gradcheck.hpp"
#include "pmss/numerics/layers.hpp"
#include "pmss/numerics/ops.hpp"
#include "pmss/numerics/rng.hpp"

namespace pmss::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Direct seven-loop convolution, no im2col, no GEMM.
inline Tensor conv_oracle(const Tensor& x, const ConvLayer& l) {
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const auto span = static_cast<long>(l.dilation * (l.kernel - 1) + 1);
  const long ho = (static_cast<long>(h + 2 * l.padding) - span) / static_cast<long>(l.stride) + 1;
  const long wo = (static_cast<long>(w + 2 * l.padding) - span) / static_cast<long>(l.stride) + 1;
  const std::size_t cin_g = l.in_channels / l.groups, cout_g = l.out_channels / l.groups;
  Tensor y = Tensor::zeros({n, l.out_channels, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
      const std::size_t g = oc / cout_g;
      for (long oy = 0; oy < ho; ++oy)
        for (long ox = 0; ox < wo; ++ox) {
          double s = l.bias ? l.bias.data()[oc] : 0.0;
          for (std::size_t ic = 0; ic < cin_g; ++ic)
            for (std::size_t ky = 0; ky < l.kernel; ++ky)
              for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                const long iy = oy * static_cast<long>(l.stride) + static_cast<long>(ky * l.dilation) -
                                static_cast<long>(l.padding);
                const long ix = ox * static_cast<long>(l.stride) + static_cast<long>(kx * l.dilation) -
                                static_cast<long>(l.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                const double wv = l.weight.data()[((oc * cin_g + ic) * l.kernel + ky) * l.kernel + kx];
                s += wv * x.at(b, g * cin_g + ic, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
          y.at(b, oc, static_cast<std::size_t>(oy), static_cast<std::size_t>(ox)) = s;
        }
    }
  return y;
}

/// Half-pixel bilinear sampling evaluated one output sample at a time.
inline Tensor bilinear_oracle(const Tensor& x, std::size_t oh, std::size_t ow) {
  const std::size_t h = x.dim(2), w = x.dim(3);
  Tensor y = Tensor::zeros({x.dim(0), x.dim(1), oh, ow});
  auto sample = [](double pos, std::size_t extent, std::size_t& i0, std::size_t& i1, double& t) {
    pos = std::clamp(pos, 0.0, static_cast<double>(extent - 1));
    i0 = static_cast<std::size_t>(pos);
    i1 = std::min(i0 + 1, extent - 1);
    t = pos - static_cast<double>(i0);
  };
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          std::size_t y0, y1, x0, x1;
          double ty, tx;
          sample((i + 0.5) * static_cast<double>(h) / static_cast<double>(oh) - 0.5, h, y0, y1, ty);
          sample((j + 0.5) * static_cast<double>(w) / static_cast<double>(ow) - 0.5, w, x0, x1, tx);
          y.at(b, c, i, j) = (1 - ty) * (1 - tx) * x.at(b, c, y0, x0) + (1 - ty) * tx * x.at(b, c, y0, x1) +
                             ty * (1 - tx) * x.at(b, c, y1, x0) + ty * tx * x.at(b, c, y1, x1);
        }
  return y;
}

/// Largest |sum - 1| over pixels; +inf if any entry is negative.
inline double max_simplex_violation(const Tensor& probs) {
  double worst = 0.0;
  for (std::size_t b = 0; b < probs.dim(0); ++b)
    for (std::size_t i = 0; i < probs.dim(2); ++i)
      for (std::size_t j = 0; j < probs.dim(3); ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < probs.dim(1); ++c) {
          const double v = probs.at(b, c, i, j);
          if (v < 0.0 || !std::isfinite(v)) return INFINITY;
          s += v;
        }
        worst = std::max(worst, std::abs(s - 1.0));
      }
  return worst;
}

}  // namespace pmss::testing
