#include <cmath>
#include <numbers>

#include "ops_internal.hpp"

namespace xalign {

namespace detail {

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const auto rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError(shape_pair(op, a, b));
    out[i] = da == 1 ? db : da;
  }
  return out;
}

std::vector<std::int64_t> aligned_strides(const Shape& shape, std::size_t rank) {
  std::vector<std::int64_t> out(rank, 0);
  const auto real = strides_of(shape);
  const auto offset = rank - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) out[offset + i] = shape[i] == 1 ? 0 : real[i];
  return out;
}

}  // namespace detail

namespace {

using detail::Grads;
using detail::Needs;

template <class F>
Tensor binary_values(const Tensor& a, const Tensor& b, const char* op, F f) {
  const auto av = a.values();
  const auto bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
    return Tensor(a.shape(), std::move(out));
  }
  Shape shape = detail::broadcast_shape(a.shape(), b.shape(), op);
  std::vector<double> out(static_cast<std::size_t>(numel(shape)));
  if (b.numel() == 1 && numel(shape) == a.numel()) {
    const double s = bv[0];
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], s);
  } else if (a.numel() == 1 && numel(shape) == b.numel()) {
    const double s = av[0];
    for (std::size_t i = 0; i < bv.size(); ++i) out[i] = f(s, bv[i]);
  } else {
    detail::broadcast_loop(shape, a.shape(), b.shape(), [&](std::int64_t ia, std::int64_t ib, std::int64_t o) {
      out[static_cast<std::size_t>(o)] = f(av[static_cast<std::size_t>(ia)], bv[static_cast<std::size_t>(ib)]);
    });
  }
  return Tensor(std::move(shape), std::move(out));
}

Tensor mask_where(const Tensor& x, bool (*pred)(double, double), double arg) {
  return detail::map_values(x, [&](double v) { return pred(v, arg) ? 1.0 : 0.0; });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto out = binary_values(a, b, "add", [](double x, double y) { return x + y; });
  return detail::record("add", {a, b}, std::move(out), [sa = a.shape(), sb = b.shape()](const Tensor& g, const Needs& n) {
    return Grads{n[0] ? sum_to(g, sa) : Tensor(), n[1] ? sum_to(g, sb) : Tensor()};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto out = binary_values(a, b, "sub", [](double x, double y) { return x - y; });
  return detail::record("sub", {a, b}, std::move(out), [sa = a.shape(), sb = b.shape()](const Tensor& g, const Needs& n) {
    return Grads{n[0] ? sum_to(g, sa) : Tensor(), n[1] ? sum_to(scale(g, -1.0), sb) : Tensor()};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto out = binary_values(a, b, "mul", [](double x, double y) { return x * y; });
  return detail::record("mul", {a, b}, std::move(out), [a, b](const Tensor& g, const Needs& n) {
    return Grads{n[0] ? sum_to(mul(g, b), a.shape()) : Tensor(), n[1] ? sum_to(mul(g, a), b.shape()) : Tensor()};
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto out = binary_values(a, b, "div", [](double x, double y) { return x / y; });
  return detail::record("div", {a, b}, std::move(out), [a, b](const Tensor& g, const Needs& n) {
    Grads grads(2);
    if (n[0]) grads[0] = sum_to(div(g, b), a.shape());
    if (n[1]) grads[1] = sum_to(scale(div(mul(g, a), mul(b, b)), -1.0), b.shape());
    return grads;
  });
}

Tensor scale(const Tensor& x, double factor) {
  auto out = detail::map_values(x, [factor](double v) { return v * factor; });
  return detail::record("scale", {x}, std::move(out), [factor](const Tensor& g, const Needs&) {
    return Grads{scale(g, factor)};
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  auto out = detail::map_values(x, [value](double v) { return v + value; });
  return detail::record("add_scalar", {x}, std::move(out), [](const Tensor& g, const Needs&) { return Grads{g}; });
}

Tensor relu(const Tensor& x) {
  auto out = detail::map_values(x, [](double v) { return v > 0.0 ? v : 0.0; });
  return detail::record("relu", {x}, std::move(out), [x](const Tensor& g, const Needs&) {
    return Grads{mul(g, mask_where(x, [](double v, double) { return v > 0.0; }, 0.0))};
  });
}

Tensor clamp_min(const Tensor& x, double lower) {
  auto out = detail::map_values(x, [lower](double v) { return v > lower ? v : lower; });
  return detail::record("clamp_min", {x}, std::move(out), [x, lower](const Tensor& g, const Needs&) {
    return Grads{mul(g, mask_where(x, [](double v, double lo) { return v > lo; }, lower))};
  });
}

Tensor abs(const Tensor& x) {
  auto out = detail::map_values(x, [](double v) { return std::fabs(v); });
  return detail::record("abs", {x}, std::move(out), [x](const Tensor& g, const Needs&) {
    auto sign = detail::map_values(x, [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    return Grads{mul(g, sign)};
  });
}

Tensor exp(const Tensor& x) {
  auto values = detail::map_values(x, [](double v) { return std::exp(v); });
  auto holder = std::make_shared<Tensor>();
  auto out = detail::record("exp", {x}, std::move(values), [holder](const Tensor& g, const Needs&) {
    return Grads{mul(g, *holder)};
  });
  *holder = out;
  return out;
}

Tensor log(const Tensor& x) {
  auto out = detail::map_values(x, [](double v) { return std::log(v); });
  return detail::record("log", {x}, std::move(out), [x](const Tensor& g, const Needs&) { return Grads{div(g, x)}; });
}

Tensor sigmoid(const Tensor& x) {
  auto values = detail::map_values(x, [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  // The backward rule refers to the recorded output so that it stays
  // differentiable; capture it after recording.
  auto holder = std::make_shared<Tensor>();
  auto out = detail::record("sigmoid", {x}, std::move(values), [holder](const Tensor& g, const Needs&) {
    const Tensor& y = *holder;
    return Grads{mul(g, mul(y, add_scalar(scale(y, -1.0), 1.0)))};
  });
  *holder = out;
  return out;
}

Tensor power(const Tensor& x, double exponent) {
  auto out = detail::map_values(x, [exponent](double v) { return std::pow(v, exponent); });
  return detail::record("power", {x}, std::move(out), [x, exponent](const Tensor& g, const Needs&) {
    if (exponent == 0.0) return Grads{Tensor::zeros(x.shape())};
    return Grads{mul(g, scale(power(x, exponent - 1.0), exponent))};
  });
}

Tensor gelu(const Tensor& x) {
  // 0.5 x (1 + tanh(u)) == x * sigmoid(2u), u = sqrt(2/pi) (x + 0.044715 x^3)
  const double c = 2.0 * std::sqrt(2.0 / std::numbers::pi);
  const Tensor cubic = mul(mul(x, x), x);
  return mul(x, sigmoid(scale(add(x, scale(cubic, 0.044715)), c)));
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) throw ShapeError(detail::shape_pair("bce_with_logits", logits.shape(), targets.shape()));
  // max(z, 0) - z y + log(1 + exp(-|z|))
  const Tensor softplus = log(add_scalar(exp(scale(abs(logits), -1.0)), 1.0));
  return mean(add(sub(relu(logits), mul(logits, targets)), softplus));
}

}  // namespace xalign
