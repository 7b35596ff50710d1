#include <array>

#include "ops_internal.hpp"

namespace xalign {

namespace {

void check_pool(const Tensor& x, std::int64_t kernel, const char* op) {
  if (x.dim() != 4) throw ShapeError(std::string(op) + ": expected (B, C, H, W), got " + to_string(x.shape()));
  if (kernel < 1 || x.size(2) % kernel != 0 || x.size(3) % kernel != 0) {
    throw ShapeError(std::string(op) + ": spatial extent of " + to_string(x.shape()) + " not divisible by " +
                     std::to_string(kernel));
  }
}

}  // namespace

std::shared_ptr<const std::vector<std::int64_t>> detail::max_pool_indices(const Tensor& x, std::int64_t kernel) {
  check_pool(x, kernel, "max_pool2d");
  const auto planes = x.size(0) * x.size(1);
  const auto h = x.size(2), w = x.size(3);
  const auto oh = h / kernel, ow = w / kernel;
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(planes * oh * ow));
  const auto v = x.values();
  std::size_t o = 0;
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t base = p * h * w;
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        std::int64_t best = base + (i * kernel) * w + j * kernel;
        for (std::int64_t di = 0; di < kernel; ++di) {
          for (std::int64_t dj = 0; dj < kernel; ++dj) {
            const auto at = base + (i * kernel + di) * w + (j * kernel + dj);
            if (v[static_cast<std::size_t>(at)] > v[static_cast<std::size_t>(best)]) best = at;
          }
        }
        (*index)[o++] = best;
      }
    }
  }
  return index;
}

Tensor max_pool2d(const Tensor& x, std::int64_t kernel) {
  auto index = detail::max_pool_indices(x, kernel);
  return gather(x, std::move(index), Shape{x.size(0), x.size(1), x.size(2) / kernel, x.size(3) / kernel});
}

Tensor mean_pool2d(const Tensor& x, std::int64_t kernel) {
  check_pool(x, kernel, "mean_pool2d");
  const auto b = x.size(0), c = x.size(1), oh = x.size(2) / kernel, ow = x.size(3) / kernel;
  return mean(reshape(x, {b, c, oh, kernel, ow, kernel}), {3, 5});
}

Tensor softmax(const Tensor& x, std::int64_t axis) {
  axis = normalize_axis(axis, x.dim(), "softmax");
  const Tensor shift = max(x, {axis}, true).detach();
  const Tensor e = exp(sub(x, shift));
  return div(e, sum(e, {axis}, true));
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.dim() < 1 || gamma.shape() != Shape{x.size(-1)} || beta.shape() != gamma.shape()) {
    throw ShapeError(detail::shape_pair("layernorm", x.shape(), gamma.shape()));
  }
  const Tensor centered = sub(x, mean(x, {-1}, true));
  const Tensor variance = mean(mul(centered, centered), {-1}, true);
  const Tensor normalized = mul(centered, power(add_scalar(variance, eps), -0.5));
  return add(mul(normalized, gamma), beta);
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::max_pool: return "max_pool";
    case OpKind::mean_pool: return "mean_pool";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax: return "softmax";
    case OpKind::layernorm: return "layernorm";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose: return "transpose";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::max: return "max";
    case OpKind::min: return "min";
    case OpKind::abs: return "abs";
    case OpKind::clamp_min: return "clamp_min";
    case OpKind::power: return "power";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
  }
  return "unknown";
}

std::span<const OpKind> all_op_kinds() {
  static constexpr std::array kinds{
      OpKind::add,     OpKind::sub,       OpKind::mul,     OpKind::div,   OpKind::matmul,    OpKind::conv2d,
      OpKind::max_pool, OpKind::mean_pool, OpKind::relu,   OpKind::gelu,  OpKind::sigmoid,   OpKind::softmax,
      OpKind::layernorm, OpKind::reshape, OpKind::transpose, OpKind::slice, OpKind::concat,  OpKind::sum,
      OpKind::mean,    OpKind::max,       OpKind::min,     OpKind::abs,   OpKind::clamp_min, OpKind::power,
      OpKind::exp,     OpKind::log,
  };
  return kinds;
}

Tensor forward_op(OpKind kind, std::span<const Tensor> in, const OpAttrs& at) {
  auto need = [&](std::size_t count) {
    if (in.size() != count) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(count) + " inputs, got " +
                                  std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::div: need(2); return div(in[0], in[1]);
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::conv2d: need(2); return conv2d(in[0], in[1], at.stride, at.padding);
    case OpKind::max_pool: need(1); return max_pool2d(in[0], at.kernel);
    case OpKind::mean_pool: need(1); return mean_pool2d(in[0], at.kernel);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::gelu: need(1); return gelu(in[0]);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::softmax: need(1); return softmax(in[0], at.axis);
    case OpKind::layernorm: need(3); return layernorm(in[0], in[1], in[2], at.scalar > 0.0 ? at.scalar : 1e-5);
    case OpKind::reshape: need(1); return reshape(in[0], at.shape);
    case OpKind::transpose: need(1); return transpose(in[0], at.axis, at.axis1);
    case OpKind::slice: need(1); return slice(in[0], at.axis, at.start, at.end);
    case OpKind::concat: return concat(std::vector<Tensor>(in.begin(), in.end()), at.axis);
    case OpKind::sum: need(1); return sum(in[0], at.axes, at.keepdim);
    case OpKind::mean: need(1); return mean(in[0], at.axes, at.keepdim);
    case OpKind::max: need(1); return max(in[0], at.axes, at.keepdim);
    case OpKind::min: need(1); return min(in[0], at.axes, at.keepdim);
    case OpKind::abs: need(1); return abs(in[0]);
    case OpKind::clamp_min: need(1); return clamp_min(in[0], at.scalar);
    case OpKind::power: need(1); return power(in[0], at.scalar);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::log: need(1); return log(in[0]);
  }
  throw std::invalid_argument("forward_op: unknown op kind");
}

}  // namespace xalign
