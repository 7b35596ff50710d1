#include <cblas.h>

#include <algorithm>

#include "ops_internal.hpp"

namespace xalign {

namespace {

using detail::ConvGeometry;
using detail::Grads;
using detail::Needs;

// Row-major C (m x n) = op(A) op(B) + beta C.
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const double* a, const double* b,
          double beta, double* c) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0) std::fill_n(c, m * n, 0.0);
    return;
  }
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a,
              static_cast<int>(trans_a ? m : k), b, static_cast<int>(trans_b ? k : n), beta, c, static_cast<int>(n));
}

// Unfolds one (C, H, W) image into (C*kh*kw, out_h*out_w) patch columns.
void im2col(const double* x, const ConvGeometry& g, double* col) {
  const auto spatial = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
        double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * spatial;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = oh * g.stride - g.padding + ki;
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill_n(dst, g.out_w, 0.0);
            continue;
          }
          const double* src = x + (c * g.height + ih) * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = ow * g.stride - g.padding + kj;
            dst[ow] = (iw < 0 || iw >= g.width) ? 0.0 : src[iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates patch columns back into the image.
void col2im(const double* col, const ConvGeometry& g, double* x) {
  const auto spatial = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
        const double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * spatial;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          double* dst = x + (c * g.height + ih) * g.width;
          const double* src = row + oh * g.out_w;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = ow * g.stride - g.padding + kj;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

bool direct_columns(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const ConvGeometry& g);

}  // namespace

namespace detail {

ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::int64_t stride, std::int64_t padding) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[1]) throw ShapeError(shape_pair("conv2d", x, w));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, padding, 0, 0};
  const auto span_h = x[2] + 2 * padding - w[2];
  const auto span_w = x[3] + 2 * padding - w[3];
  if (span_h < 0 || span_w < 0) throw ShapeError(shape_pair("conv2d", x, w));
  g.out_h = span_h / stride + 1;
  g.out_w = span_w / stride + 1;
  return g;
}

Tensor conv2d_input_grad(const Tensor& grad, const Tensor& weight, const ConvGeometry& g) {
  const auto spatial = g.out_h * g.out_w;
  const auto patch = g.channels * g.kernel_h * g.kernel_w;
  std::vector<double> out(static_cast<std::size_t>(g.batch * g.channels * g.height * g.width), 0.0);
  std::vector<double> col(static_cast<std::size_t>(patch * spatial));
  const double* gp = ptr(grad);
  const double* wp = ptr(weight);
  for (std::int64_t b = 0; b < g.batch; ++b) {
    double* dst = out.data() + b * g.channels * g.height * g.width;
    if (direct_columns(g)) {
      gemm(true, false, patch, spatial, g.out_channels, wp, gp + b * g.out_channels * spatial, 0.0, dst);
    } else {
      gemm(true, false, patch, spatial, g.out_channels, wp, gp + b * g.out_channels * spatial, 0.0, col.data());
      col2im(col.data(), g, dst);
    }
  }
  Tensor result(Shape{g.batch, g.channels, g.height, g.width}, std::move(out));
  return record("conv2d_input_grad", {grad, weight}, std::move(result), [grad, weight, g](const Tensor& gg, const Needs& n) {
    Grads grads(2);
    if (n[0]) grads[0] = conv_forward(gg, weight, g);
    if (n[1]) grads[1] = conv2d_weight_grad(gg, grad, g);
    return grads;
  });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad, const ConvGeometry& g) {
  const auto spatial = g.out_h * g.out_w;
  const auto patch = g.channels * g.kernel_h * g.kernel_w;
  std::vector<double> out(static_cast<std::size_t>(g.out_channels * patch), 0.0);
  std::vector<double> col(static_cast<std::size_t>(patch * spatial));
  const double* xp = ptr(x);
  const double* gp = ptr(grad);
  for (std::int64_t b = 0; b < g.batch; ++b) {
    const double* columns = xp + b * g.channels * g.height * g.width;
    if (!direct_columns(g)) {
      im2col(columns, g, col.data());
      columns = col.data();
    }
    gemm(false, true, g.out_channels, patch, spatial, gp + b * g.out_channels * spatial, columns, 1.0, out.data());
  }
  Tensor result(Shape{g.out_channels, g.channels, g.kernel_h, g.kernel_w}, std::move(out));
  return record("conv2d_weight_grad", {x, grad}, std::move(result), [x, grad, g](const Tensor& gg, const Needs& n) {
    Grads grads(2);
    if (n[0]) grads[0] = conv2d_input_grad(grad, gg, g);
    if (n[1]) grads[1] = conv_forward(x, gg, g);
    return grads;
  });
}

}  // namespace detail

namespace {

Tensor conv_forward(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  const auto spatial = g.out_h * g.out_w;
  const auto patch = g.channels * g.kernel_h * g.kernel_w;
  std::vector<double> out(static_cast<std::size_t>(g.batch * g.out_channels * spatial));
  std::vector<double> col(direct_columns(g) ? 0 : static_cast<std::size_t>(patch * spatial));
  const double* xp = detail::ptr(x);
  const double* wp = detail::ptr(w);
  for (std::int64_t b = 0; b < g.batch; ++b) {
    const double* columns = xp + b * g.channels * g.height * g.width;
    if (!direct_columns(g)) {
      im2col(columns, g, col.data());
      columns = col.data();
    }
    gemm(false, false, g.out_channels, spatial, patch, wp, columns, 0.0, out.data() + b * g.out_channels * spatial);
  }
  Tensor result(Shape{g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out));
  return detail::record("conv2d", {x, w}, std::move(result), [x, w, g](const Tensor& grad, const Needs& n) {
    Grads grads(2);
    if (n[0]) grads[0] = detail::conv2d_input_grad(grad, w, g);
    if (n[1]) grads[1] = detail::conv2d_weight_grad(x, grad, g);
    return grads;
  });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, std::int64_t stride, std::int64_t padding) {
  return conv_forward(x, weight, detail::conv_geometry(x.shape(), weight.shape(), stride, padding));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) throw ShapeError(detail::shape_pair("matmul", a.shape(), b.shape()));
  const auto m = a.size(-2);
  const auto k = a.size(-1);
  const auto n = b.size(-1);
  if (b.size(-2) != k) throw ShapeError(detail::shape_pair("matmul", a.shape(), b.shape()));
  Shape shape(a.shape().begin(), a.shape().end() - 2);
  const std::int64_t batch = numel(shape);
  shape.push_back(m);
  shape.push_back(n);
  std::vector<double> out(static_cast<std::size_t>(batch * m * n));
  if (b.dim() == 2) {
    gemm(false, false, batch * m, n, k, detail::ptr(a), detail::ptr(b), 0.0, out.data());
    return detail::record("matmul", {a, b}, Tensor(std::move(shape), std::move(out)), [a, b, batch, m, k, n](const Tensor& g, const Needs& need) {
      Grads grads(2);
      if (need[0]) grads[0] = matmul(g, transpose(b, 0, 1));
      if (need[1]) grads[1] = matmul(transpose(reshape(a, {batch * m, k}), 0, 1), reshape(g, {batch * m, n}));
      return grads;
    });
  }
  if (!std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(), b.shape().end() - 2)) {
    throw ShapeError(detail::shape_pair("matmul", a.shape(), b.shape()));
  }
  const double* ap = detail::ptr(a);
  const double* bp = detail::ptr(b);
  for (std::int64_t i = 0; i < batch; ++i) gemm(false, false, m, n, k, ap + i * m * k, bp + i * k * n, 0.0, out.data() + i * m * n);
  return detail::record("matmul", {a, b}, Tensor(std::move(shape), std::move(out)), [a, b](const Tensor& g, const Needs& need) {
    Grads grads(2);
    if (need[0]) grads[0] = matmul(g, transpose(b, -1, -2));
    if (need[1]) grads[1] = matmul(transpose(a, -1, -2), g);
    return grads;
  });
}

}  // namespace xalign
