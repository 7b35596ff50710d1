#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "xalign/graph.hpp"
#include "xalign/tensor.hpp"

// Differentiable tensor operations. Every backward rule is itself written in
// terms of these ops, so running backward with create_graph=true yields
// gradients that can be differentiated again. Rules for piecewise-linear ops
// (relu, clamp_min, abs, max/min, max-pool) use constant masks or index sets,
// so their second derivative is zero almost everywhere.

namespace xalign {

// Elementwise binary ops broadcast with the usual trailing-axis rule.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

// Elementwise unary ops.
Tensor relu(const Tensor& x);
Tensor clamp_min(const Tensor& x, double lower);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// x^exponent for a constant exponent.
Tensor power(const Tensor& x, double exponent);
/// tanh-approximated GELU.
Tensor gelu(const Tensor& x);

/// (..., M, K) x (K, N) or (..., M, K) x (..., K, N) with equal batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);

/// x: (B, C, H, W), weight: (O, C, kh, kw). No bias.
Tensor conv2d(const Tensor& x, const Tensor& weight, std::int64_t stride = 1, std::int64_t padding = 0);
/// Non-overlapping k x k windows; ties go to the first maximum in scan order.
Tensor max_pool2d(const Tensor& x, std::int64_t kernel);
Tensor mean_pool2d(const Tensor& x, std::int64_t kernel);

/// Softmax along `axis`, max-subtracted.
Tensor softmax(const Tensor& x, std::int64_t axis = -1);
/// Normalizes over the last axis, then applies gamma/beta (shape [D]).
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Shape manipulation. reshape shares the value buffer.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<std::int64_t> order);
Tensor transpose(const Tensor& x, std::int64_t axis0, std::int64_t axis1);
/// Elements [start, end) along `axis`.
Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t end);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
/// Sums a broadcast result back down to `shape`.
Tensor sum_to(const Tensor& x, const Shape& shape);

// Reductions. An empty axis list reduces everything.
Tensor sum(const Tensor& x, std::vector<std::int64_t> axes = {}, bool keepdim = false);
Tensor mean(const Tensor& x, std::vector<std::int64_t> axes = {}, bool keepdim = false);
Tensor max(const Tensor& x, std::vector<std::int64_t> axes = {}, bool keepdim = false);
Tensor min(const Tensor& x, std::vector<std::int64_t> axes = {}, bool keepdim = false);

/// out.flat[j] = x.flat[index[j]]; out has shape `shape`.
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> index, Shape shape);
/// Adjoint of gather: out (shape `shape`) accumulates g.flat[j] at index[j].
Tensor scatter_add(const Tensor& g, std::shared_ptr<const std::vector<std::int64_t>> index, Shape shape);

/// Mean binary cross-entropy over all elements, computed from logits.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

namespace detail {
struct ConvGeometry {
  std::int64_t batch, channels, height, width;
  std::int64_t out_channels, kernel_h, kernel_w;
  std::int64_t stride, padding;
  std::int64_t out_h, out_w;
};
ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::int64_t stride, std::int64_t padding);
Tensor conv2d_input_grad(const Tensor& grad, const Tensor& weight, const ConvGeometry& geom);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad, const ConvGeometry& geom);
/// Flat index of the first maximum in scan order for every pooling window.
std::shared_ptr<const std::vector<std::int64_t>> max_pool_indices(const Tensor& x, std::int64_t kernel);
}  // namespace detail

/// Op kinds reachable through the generic dispatcher.
enum class OpKind {
  add, sub, mul, div, matmul, conv2d, max_pool, mean_pool, relu, gelu, sigmoid, softmax, layernorm,
  reshape, transpose, slice, concat, sum, mean, max, min, abs, clamp_min, power, exp, log,
};

std::string_view op_name(OpKind kind);
std::span<const OpKind> all_op_kinds();

struct OpAttrs {
  Shape shape;                      // reshape target
  std::vector<std::int64_t> axes;   // reductions
  std::int64_t axis = -1;           // softmax, slice, concat
  std::int64_t axis1 = -2;          // transpose partner of `axis`
  std::int64_t start = 0, end = 0;  // slice
  std::int64_t stride = 1, padding = 0, kernel = 2;
  double scalar = 0.0;              // power exponent, clamp lower bound, layernorm eps
  bool keepdim = false;
};

/// Applies `kind` to `inputs`. layernorm takes (x, gamma, beta); concat takes
/// any number of parts; everything else takes one or two operands.
Tensor forward_op(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

}  // namespace xalign
