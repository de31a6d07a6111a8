// Grouped, dilated, strided 2-D convolution via im2col + GEMM.

#include <Eigen/Core>
#include <vector>

#include "pmss/numerics/ops.hpp"
#include "pmss/numerics/parallel.hpp"
#include "pmss/numerics/tape.hpp"

namespace pmss::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct Geometry {
  std::size_t n, cin, h, w, cout, ho, wo;
  std::size_t k, dil, stride, pad, groups;
  std::size_t cin_g, cout_g, rows, cols;  // rows = cin_g*k*k, cols = ho*wo

  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

Geometry geometry_of(const Tensor& x, const ConvLayer& l) {
  l.validate();
  if (x.rank() != 4) throw ShapeError("conv2d expects an N x C x H x W input, got " + shape_str(x.shape()));
  if (x.dim(1) != l.in_channels)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x.dim(1)) + ", layer expects " +
                     std::to_string(l.in_channels));
  const Shape expect_w{l.out_channels, l.in_channels / l.groups, l.kernel, l.kernel};
  if (!l.weight || l.weight.shape() != expect_w)
    throw ShapeError("conv2d weight shape " + (l.weight ? shape_str(l.weight.shape()) : std::string("<null>")) +
                     " does not match " + shape_str(expect_w));
  if (l.bias && l.bias.shape() != Shape{l.out_channels}) throw ShapeError("conv2d bias shape mismatch");
  Geometry g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = l.out_channels;
  g.k = l.kernel;
  g.dil = l.dilation;
  g.stride = l.stride;
  g.pad = l.padding;
  g.groups = l.groups;
  g.ho = l.out_extent(g.h);
  g.wo = l.out_extent(g.w);
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  g.rows = g.cin_g * g.k * g.k;
  g.cols = g.ho * g.wo;
  return g;
}

// Gathers the receptive fields of one group of one image into a rows x cols matrix.
void im2col(const Geometry& g, const double* img, std::size_t group, double* col) {
  const auto ipad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    const double* plane = img + (group * g.cin_g + c) * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = col + ((c * g.k + ki) * g.k + kj) * g.cols;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki * g.dil) - ipad;
          double* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(ih) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj * g.dil) - ipad;
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[iw];
          }
        }
      }
    }
  }
}

// Scatter-adds a rows x cols matrix back into one group of one image.
void col2im(const Geometry& g, const double* col, std::size_t group, double* img) {
  const auto ipad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    double* plane = img + (group * g.cin_g + c) * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = col + ((c * g.k + ki) * g.k + kj) * g.cols;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki * g.dil) - ipad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const double* src = row + oh * g.wo;
          double* dst = plane + static_cast<std::size_t>(ih) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj * g.dil) - ipad;
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const ConvLayer& layer) {
  const Geometry g = geometry_of(x, layer);
  const Tensor weight = layer.weight;
  const Tensor bias = layer.bias;
  const bool track = tracking({&x, &weight, &bias});
  Tensor y = make_result({g.n, g.cout, g.ho, g.wo}, track);

  const double* xd = x.data().data();
  const double* wd = weight.data().data();
  double* yd = y.data().data();
  parallel_for(g.n, [&](std::size_t n) {
    std::vector<double> col(g.pointwise() ? 0 : g.rows * g.cols);
    const double* img = xd + n * g.cin * g.h * g.w;
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const double* cols = img + grp * g.cin_g * g.h * g.w;
      if (!g.pointwise()) {
        im2col(g, img, grp, col.data());
        cols = col.data();
      }
      ConstMatMap wm(wd + grp * g.cout_g * g.rows, g.cout_g, g.rows);
      ConstMatMap cm(cols, g.rows, g.cols);
      MatMap ym(yd + (n * g.cout + grp * g.cout_g) * g.cols, g.cout_g, g.cols);
      ym.noalias() = wm * cm;
    }
    if (bias) {
      const double* bd = bias.data().data();
      for (std::size_t c = 0; c < g.cout; ++c) {
        double* out = yd + (n * g.cout + c) * g.cols;
        for (std::size_t p = 0; p < g.cols; ++p) out[p] += bd[c];
      }
    }
  });

  if (track) {
    Tape::current()->record("conv2d", {x, weight, bias}, y, [x, weight, bias, y, g]() mutable {
      const double* dy = y.grad().data();
      if (x.requires_grad()) {
        double* dx = x.grad_buffer().data();
        const double* wd = weight.data().data();
        parallel_for(g.n, [&](std::size_t n) {
          std::vector<double> dcol(g.rows * g.cols);
          double* dimg = dx + n * g.cin * g.h * g.w;
          for (std::size_t grp = 0; grp < g.groups; ++grp) {
            ConstMatMap wm(wd + grp * g.cout_g * g.rows, g.cout_g, g.rows);
            ConstMatMap dym(dy + (n * g.cout + grp * g.cout_g) * g.cols, g.cout_g, g.cols);
            MatMap dcm(dcol.data(), g.rows, g.cols);
            dcm.noalias() = wm.transpose() * dym;
            if (g.pointwise()) {
              MatMap dxm(dimg + grp * g.cin_g * g.cols, g.rows, g.cols);
              dxm += dcm;
            } else {
              col2im(g, dcol.data(), grp, dimg);
            }
          }
        });
      }
      if (weight.requires_grad()) {
        double* dw = weight.grad_buffer().data();
        const double* xd = x.data().data();
        std::vector<double> col(g.pointwise() ? 0 : g.rows * g.cols);
        RowMat partial(g.cout_g, g.rows);
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* img = xd + n * g.cin * g.h * g.w;
          for (std::size_t grp = 0; grp < g.groups; ++grp) {
            const double* cols = img + grp * g.cin_g * g.h * g.w;
            if (!g.pointwise()) {
              im2col(g, img, grp, col.data());
              cols = col.data();
            }
            ConstMatMap cm(cols, g.rows, g.cols);
            ConstMatMap dym(dy + (n * g.cout + grp * g.cout_g) * g.cols, g.cout_g, g.cols);
            partial.noalias() = dym * cm.transpose();
            MatMap dwm(dw + grp * g.cout_g * g.rows, g.cout_g, g.rows);
            dwm += partial;
          }
        }
      }
      if (bias && bias.requires_grad()) {
        auto db = bias.grad_buffer();
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t c = 0; c < g.cout; ++c) {
            const double* row = dy + (n * g.cout + c) * g.cols;
            double s = 0.0;
            for (std::size_t p = 0; p < g.cols; ++p) s += row[p];
            db[c] += s;
          }
      }
    });
  }
  return y;
}

}  // namespace pmss::ops
