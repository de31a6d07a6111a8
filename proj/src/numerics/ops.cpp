#include "pmss/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pmss/numerics/tape.hpp"

namespace pmss::ops {

namespace {

constexpr double kFloor = std::numeric_limits<double>::min();

void require_4d(const Tensor& x, const char* op) {
  if (!x || x.rank() != 4)
    throw ShapeError(std::string(op) + " expects an N x C x H x W tensor, got " +
                     (x ? shape_str(x.shape()) : std::string("<null>")));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void record(const char* op, std::vector<Tensor> inputs, const Tensor& out, Tape::Vjp vjp) {
  Tape::current()->record(op, std::move(inputs), out, std::move(vjp));
}

}  // namespace

Tensor relu(const Tensor& x) {
  const bool track = tracking({&x});
  Tensor y = make_result(x.shape(), track);
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] > 0.0 ? xs[i] : 0.0;
  if (track) {
    record("relu", {x}, y, [x, y]() mutable {
      auto dx = x.grad_buffer();
      auto dy = y.grad();
      auto xs = x.data();
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (xs[i] > 0.0) dx[i] += dy[i];
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool track = tracking({&a, &b});
  Tensor y = make_result(a.shape(), track);
  auto as = a.data();
  auto bs = b.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] + bs[i];
  if (track) {
    record("add", {a, b}, y, [a, b, y]() mutable {
      auto dy = y.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto d = t->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool track = tracking({&a, &b});
  Tensor y = make_result(a.shape(), track);
  auto as = a.data();
  auto bs = b.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] * bs[i];
  if (track) {
    record("mul", {a, b}, y, [a, b, y]() mutable {
      auto dy = y.grad();
      if (a.requires_grad()) {
        auto d = a.grad_buffer();
        auto other = b.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * other[i];
      }
      if (b.requires_grad()) {
        auto d = b.grad_buffer();
        auto other = a.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i] * other[i];
      }
    });
  }
  return y;
}

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind) {
  return kind == Elementwise::add ? add(a, b) : mul(a, b);
}

Tensor scale(const Tensor& x, double factor) {
  const bool track = tracking({&x});
  Tensor y = make_result(x.shape(), track);
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = xs[i] * factor;
  if (track) {
    record("scale", {x}, y, [x, y, factor]() mutable {
      auto dx = x.grad_buffer();
      auto dy = y.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * factor;
    });
  }
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) { return concat_channels(std::vector<Tensor>{a, b}); }

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels needs at least one input");
  for (const auto& p : parts) require_4d(p, "concat_channels");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t channels = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w)
      throw ShapeError("concat_channels batch/spatial mismatch: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    channels += p.dim(1);
    track = track || tracking({&p});
  }
  Tensor y = make_result({n, channels, h, w}, track);
  const std::size_t plane = h * w;
  auto ys = y.data();
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t block = p.dim(1) * plane;
      auto src = p.data().subspan(b * block, block);
      std::copy(src.begin(), src.end(), ys.begin() + static_cast<std::ptrdiff_t>((b * channels) * plane + offset));
      offset += block;
    }
  }
  if (track) {
    record("concat_channels", parts, y, [parts, y, n, channels, plane]() mutable {
      auto dy = y.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t block = p.dim(1) * plane;
        if (p.requires_grad()) {
          auto d = p.grad_buffer();
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < block; ++i) d[b * block + i] += dy[b * channels * plane + offset + i];
        }
        offset += block;
      }
    });
  }
  return y;
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  require_4d(x, "slice_channels");
  if (begin >= end || end > x.dim(1)) throw ShapeError("slice_channels range out of bounds");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const bool track = tracking({&x});
  Tensor y = make_result({n, end - begin, x.dim(2), x.dim(3)}, track);
  const std::size_t block = (end - begin) * plane;
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(xs.begin() + static_cast<std::ptrdiff_t>((b * c + begin) * plane), block,
                ys.begin() + static_cast<std::ptrdiff_t>(b * block));
  if (track) {
    record("slice_channels", {x}, y, [x, y, n, c, begin, plane, block]() mutable {
      auto dx = x.grad_buffer();
      auto dy = y.grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < block; ++i) dx[(b * c + begin) * plane + i] += dy[b * block + i];
    });
  }
  return y;
}

Tensor softmax_channels(const Tensor& x) {
  require_4d(x, "softmax_channels");
  const std::size_t n = x.dim(0), k = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (k < 2) throw ShapeError("softmax_channels needs at least 2 channels");
  const bool track = tracking({&x});
  Tensor y = make_result(x.shape(), track);
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t base = b * k * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, xs[base + c * plane + p]);
      double total = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double e = std::exp(xs[base + c * plane + p] - mx);
        ys[base + c * plane + p] = e;
        total += e;
      }
      for (std::size_t c = 0; c < k; ++c) ys[base + c * plane + p] /= total;
    }
  }
  if (track) {
    record("softmax_channels", {x}, y, [x, y, n, k, plane]() mutable {
      auto dx = x.grad_buffer();
      auto dy = y.grad();
      auto ys = y.data();
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = b * k * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          double dot = 0.0;
          for (std::size_t c = 0; c < k; ++c) dot += ys[base + c * plane + p] * dy[base + c * plane + p];
          for (std::size_t c = 0; c < k; ++c) {
            const std::size_t i = base + c * plane + p;
            dx[i] += ys[i] * (dy[i] - dot);
          }
        }
      }
    });
  }
  return y;
}

namespace {

struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;  // weight of hi
};

AxisTaps axis_taps(std::size_t in, std::size_t out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = t.hi[i] == lo ? 0.0 : src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_4d(x, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize target extents must be >= 1");
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) {
    // Identity: alias through a copy op so gradients still flow.
    return scale(x, 1.0);
  }
  const std::size_t planes = x.dim(0) * x.dim(1);
  const bool track = tracking({&x});
  Tensor y = make_result({x.dim(0), x.dim(1), out_h, out_w}, track);
  const AxisTaps ty = axis_taps(h, out_h), tx = axis_taps(w, out_w);
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xs.data() + p * h * w;
    double* dst = ys.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const double fy = ty.frac[i];
      const double* r0 = src + ty.lo[i] * w;
      const double* r1 = src + ty.hi[i] * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const double fx = tx.frac[j];
        const double top = (1.0 - fx) * r0[tx.lo[j]] + fx * r0[tx.hi[j]];
        const double bot = (1.0 - fx) * r1[tx.lo[j]] + fx * r1[tx.hi[j]];
        dst[i * out_w + j] = (1.0 - fy) * top + fy * bot;
      }
    }
  }
  if (track) {
    record("bilinear_resize", {x}, y, [x, y, planes, h, w, out_h, out_w, ty, tx]() mutable {
      auto dx = x.grad_buffer();
      auto dy = y.grad();
      for (std::size_t p = 0; p < planes; ++p) {
        double* g = dx.data() + p * h * w;
        const double* gy = dy.data() + p * out_h * out_w;
        for (std::size_t i = 0; i < out_h; ++i) {
          const double fy = ty.frac[i];
          for (std::size_t j = 0; j < out_w; ++j) {
            const double fx = tx.frac[j];
            const double v = gy[i * out_w + j];
            g[ty.lo[i] * w + tx.lo[j]] += v * (1.0 - fy) * (1.0 - fx);
            g[ty.lo[i] * w + tx.hi[j]] += v * (1.0 - fy) * fx;
            g[ty.hi[i] * w + tx.lo[j]] += v * fy * (1.0 - fx);
            g[ty.hi[i] * w + tx.hi[j]] += v * fy * fx;
          }
        }
      }
    });
  }
  return y;
}

namespace {

void check_target(const Tensor& pred, const LabelMap& target, std::int32_t ignore_index, const char* op) {
  require_4d(pred, op);
  if (pred.dim(0) != target.n || pred.dim(2) != target.h || pred.dim(3) != target.w)
    throw ShapeError(std::string(op) + ": prediction " + shape_str(pred.shape()) + " vs labels " +
                     shape_str({target.n, target.h, target.w}));
  target.validate(pred.dim(1), ignore_index);
}

}  // namespace

Tensor cross_entropy_logits(const Tensor& logits, const LabelMap& target, std::int32_t ignore_index) {
  check_target(logits, target, ignore_index, "cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  auto zs = logits.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      const auto t = target.labels[b * plane + p];
      if (t == ignore_index) continue;
      const std::size_t base = b * k * plane + p;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, zs[base + c * plane]);
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += std::exp(zs[base + c * plane] - mx);
      total += mx + std::log(s) - zs[base + static_cast<std::size_t>(t) * plane];
      ++count;
    }
  const bool track = tracking({&logits});
  Tensor y = make_result({1}, track);
  y.data()[0] = count ? total / static_cast<double>(count) : 0.0;
  if (track && count) {
    record("cross_entropy", {logits}, y, [logits, y, target, ignore_index, n, k, plane, count]() mutable {
      auto dz = logits.grad_buffer();
      auto zs = logits.data();
      const double g = y.grad()[0] / static_cast<double>(count);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
          const auto t = target.labels[b * plane + p];
          if (t == ignore_index) continue;
          const std::size_t base = b * k * plane + p;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, zs[base + c * plane]);
          double s = 0.0;
          for (std::size_t c = 0; c < k; ++c) s += std::exp(zs[base + c * plane] - mx);
          for (std::size_t c = 0; c < k; ++c) {
            const double prob = std::exp(zs[base + c * plane] - mx) / s;
            dz[base + c * plane] += g * (prob - (static_cast<std::int32_t>(c) == t ? 1.0 : 0.0));
          }
        }
    });
  }
  return y;
}

Tensor cross_entropy_probs(const Tensor& probs, const LabelMap& target, std::int32_t ignore_index) {
  check_target(probs, target, ignore_index, "cross_entropy");
  const std::size_t n = probs.dim(0), k = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  auto ps = probs.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      const auto t = target.labels[b * plane + p];
      if (t == ignore_index) continue;
      total -= std::log(std::max(ps[(b * k + static_cast<std::size_t>(t)) * plane + p], kFloor));
      ++count;
    }
  const bool track = tracking({&probs});
  Tensor y = make_result({1}, track);
  y.data()[0] = count ? total / static_cast<double>(count) : 0.0;
  if (track && count) {
    record("cross_entropy_probs", {probs}, y, [probs, y, target, ignore_index, n, k, plane, count]() mutable {
      auto dp = probs.grad_buffer();
      auto ps = probs.data();
      const double g = y.grad()[0] / static_cast<double>(count);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
          const auto t = target.labels[b * plane + p];
          if (t == ignore_index) continue;
          const std::size_t i = (b * k + static_cast<std::size_t>(t)) * plane + p;
          dp[i] -= g / std::max(ps[i], kFloor);
        }
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  const bool track = tracking({&x});
  Tensor y = make_result({1}, track);
  double s = 0.0;
  for (double v : x.data()) s += v;
  y.data()[0] = s;
  if (track) {
    record("sum", {x}, y, [x, y]() mutable {
      auto dx = x.grad_buffer();
      const double g = y.grad()[0];
      for (auto& d : dx) d += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor affine_channels(const Tensor& x, const Tensor& scale_t, const Tensor& shift) {
  require_4d(x, "affine_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (scale_t.shape() != Shape{c} || shift.shape() != Shape{c})
    throw ShapeError("affine_channels parameters must have shape {C}");
  const bool track = tracking({&x, &scale_t, &shift});
  Tensor y = make_result(x.shape(), track);
  auto xs = x.data();
  auto ys = y.data();
  auto sc = scale_t.data();
  auto sh = shift.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (b * c + ch) * plane + p;
        ys[i] = xs[i] * sc[ch] + sh[ch];
      }
  if (track) {
    record("affine_channels", {x, scale_t, shift}, y, [x, scale_t, shift, y, n, c, plane]() mutable {
      auto dy = y.grad();
      auto xs = x.data();
      auto sc = scale_t.data();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t i = (b * c + ch) * plane + p;
            if (x.requires_grad()) x.grad_buffer()[i] += dy[i] * sc[ch];
            if (scale_t.requires_grad()) scale_t.grad_buffer()[ch] += dy[i] * xs[i];
            if (shift.requires_grad()) shift.grad_buffer()[ch] += dy[i];
          }
    });
  }
  return y;
}

Tensor global_max_pool(const Tensor& x) {
  require_4d(x, "global_max_pool");
  const std::size_t planes = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  const bool track = tracking({&x});
  Tensor y = make_result({x.dim(0), x.dim(1), 1, 1}, track);
  std::vector<std::size_t> argmax(planes);
  auto xs = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xs.data() + p * plane;
    const auto best = static_cast<std::size_t>(std::max_element(src, src + plane) - src);
    argmax[p] = p * plane + best;
    y.data()[p] = src[best];
  }
  if (track) {
    record("global_max_pool", {x}, y, [x, y, argmax]() mutable {
      auto dx = x.grad_buffer();
      auto dy = y.grad();
      for (std::size_t p = 0; p < argmax.size(); ++p) dx[argmax[p]] += dy[p];
    });
  }
  return y;
}

Tensor expand_spatial(const Tensor& x, std::size_t h, std::size_t w) {
  require_4d(x, "expand_spatial");
  if (x.dim(2) != 1 || x.dim(3) != 1) throw ShapeError("expand_spatial expects N x C x 1 x 1");
  const std::size_t planes = x.dim(0) * x.dim(1), plane = h * w;
  const bool track = tracking({&x});
  Tensor y = make_result({x.dim(0), x.dim(1), h, w}, track);
  auto ys = y.data();
  for (std::size_t p = 0; p < planes; ++p) std::fill_n(ys.begin() + static_cast<std::ptrdiff_t>(p * plane), plane, x.data()[p]);
  if (track) {
    record("expand_spatial", {x}, y, [x, y, planes, plane]() mutable {
      auto dx = x.grad_buffer();
      auto dy = y.grad();
      for (std::size_t p = 0; p < planes; ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += dy[p * plane + i];
        dx[p] += s;
      }
    });
  }
  return y;
}

Tensor token_mix(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_4d(x, "token_mix");
  const std::size_t rows = x.dim(0) * x.dim(1), t = x.dim(2) * x.dim(3);
  if (weight.shape() != Shape{t, t} || bias.shape() != Shape{t})
    throw ShapeError("token_mix expects weight {T,T} and bias {T} for T=" + std::to_string(t));
  const bool track = tracking({&x, &weight, &bias});
  Tensor y = make_result(x.shape(), track);
  auto xs = x.data();
  auto ws = weight.data();
  auto bs = bias.data();
  auto ys = y.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xs.data() + r * t;
    double* yr = ys.data() + r * t;
    for (std::size_t o = 0; o < t; ++o) {
      const double* wr = ws.data() + o * t;
      double s = bs[o];
      for (std::size_t i = 0; i < t; ++i) s += wr[i] * xr[i];
      yr[o] = s;
    }
  }
  if (track) {
    record("token_mix", {x, weight, bias}, y, [x, weight, bias, y, rows, t]() mutable {
      auto dy = y.grad();
      auto xs = x.data();
      auto ws = weight.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* g = dy.data() + r * t;
        if (x.requires_grad()) {
          double* dx = x.grad_buffer().data() + r * t;
          for (std::size_t o = 0; o < t; ++o)
            for (std::size_t i = 0; i < t; ++i) dx[i] += g[o] * ws[o * t + i];
        }
        if (weight.requires_grad()) {
          double* dw = weight.grad_buffer().data();
          const double* xr = xs.data() + r * t;
          for (std::size_t o = 0; o < t; ++o)
            for (std::size_t i = 0; i < t; ++i) dw[o * t + i] += g[o] * xr[i];
        }
        if (bias.requires_grad()) {
          double* db = bias.grad_buffer().data();
          for (std::size_t o = 0; o < t; ++o) db[o] += g[o];
        }
      }
    });
  }
  return y;
}

Tensor detach(const Tensor& x) { return x.clone(false); }

}  // namespace pmss::ops
