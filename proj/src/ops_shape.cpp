#include <algorithm>
#include <limits>
#include <numeric>

#include "ops_internal.hpp"

namespace xalign {

namespace {

using detail::Grads;
using detail::Needs;

std::vector<std::int64_t> normalize_axes(std::vector<std::int64_t> axes, std::int64_t rank, const char* op) {
  if (axes.empty()) {
    axes.resize(static_cast<std::size_t>(rank));
    std::iota(axes.begin(), axes.end(), 0);
    return axes;
  }
  for (auto& a : axes) a = normalize_axis(a, rank, op);
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) throw ShapeError(std::string(op) + ": repeated axis");
  return axes;
}

Shape keepdim_shape(const Shape& shape, const std::vector<std::int64_t>& axes) {
  Shape out = shape;
  for (auto a : axes) out[static_cast<std::size_t>(a)] = 1;
  return out;
}

Shape squeezed_shape(const Shape& shape, const std::vector<std::int64_t>& axes) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!std::binary_search(axes.begin(), axes.end(), static_cast<std::int64_t>(i))) out.push_back(shape[i]);
  }
  return out;
}

/// Calls f(input_offset, output_offset) for each input element, where the
/// output is `shape` reduced over `axes` (keepdim layout).
template <class F>
void reduce_loop(const Shape& shape, const std::vector<std::int64_t>& axes, F&& f) {
  const Shape kept = keepdim_shape(shape, axes);
  detail::broadcast_loop(shape, shape, kept, [&](std::int64_t in, std::int64_t out, std::int64_t) { f(in, out); });
}

// Places g into a zero tensor of extent `full` along `axis`, starting at `start`.
Tensor embed(const Tensor& g, std::int64_t axis, std::int64_t start, std::int64_t full) {
  Shape shape = g.shape();
  const auto len = shape[static_cast<std::size_t>(axis)];
  shape[static_cast<std::size_t>(axis)] = full;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
  std::vector<double> out(static_cast<std::size_t>(numel(shape)), 0.0);
  const double* src = detail::ptr(g);
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(src + o * len * inner, len * inner, out.data() + (o * full + start) * inner);
  }
  return detail::record("embed", {g}, Tensor(std::move(shape), std::move(out)),
                        [axis, start, len](const Tensor& gg, const Needs&) {
                          return Grads{slice(gg, axis, start, start + len)};
                        });
}

Tensor reduce_select(const Tensor& x, std::vector<std::int64_t> axes, bool keepdim, bool take_max, const char* op) {
  if (x.numel() == 0) throw ShapeError(std::string(op) + ": empty tensor");
  axes = normalize_axes(std::move(axes), x.dim(), op);
  const Shape kept = keepdim_shape(x.shape(), axes);
  const auto count = static_cast<std::size_t>(numel(kept));
  auto index = std::make_shared<std::vector<std::int64_t>>(count, -1);
  std::vector<double> best(count, take_max ? -std::numeric_limits<double>::infinity()
                                           : std::numeric_limits<double>::infinity());
  const auto v = x.values();
  reduce_loop(x.shape(), axes, [&](std::int64_t in, std::int64_t out) {
    const double value = v[static_cast<std::size_t>(in)];
    auto& slot = (*index)[static_cast<std::size_t>(out)];
    // Strict comparison keeps the first extreme in scan order.
    if (slot < 0 || (take_max ? value > best[static_cast<std::size_t>(out)] : value < best[static_cast<std::size_t>(out)])) {
      slot = in;
      best[static_cast<std::size_t>(out)] = value;
    }
  });
  return gather(x, std::move(index), keepdim ? kept : squeezed_shape(x.shape(), axes));
}

}  // namespace

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t known = 1;
  std::int64_t infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred axis in " + to_string(shape));
      infer = static_cast<std::int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) throw ShapeError(detail::shape_pair("reshape", x.shape(), shape));
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  if (numel(shape) != x.numel()) throw ShapeError(detail::shape_pair("reshape", x.shape(), shape));
  if (shape == x.shape()) return x;
  auto out = detail::TensorAccess::alias(x, shape);
  return detail::record("reshape", {x}, std::move(out), [from = x.shape()](const Tensor& g, const Needs&) {
    return Grads{reshape(g, from)};
  });
}

Tensor permute(const Tensor& x, std::vector<std::int64_t> order) {
  const auto rank = x.dim();
  if (static_cast<std::int64_t>(order.size()) != rank) throw ShapeError("permute: order length does not match rank of " + to_string(x.shape()));
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  for (auto& a : order) {
    a = normalize_axis(a, rank, "permute");
    if (seen[static_cast<std::size_t>(a)]) throw ShapeError("permute: repeated axis");
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape shape(static_cast<std::size_t>(rank));
  const auto in_strides = strides_of(x.shape());
  std::vector<std::int64_t> strides(static_cast<std::size_t>(rank));
  for (std::size_t i = 0; i < order.size(); ++i) {
    shape[i] = x.shape()[static_cast<std::size_t>(order[i])];
    strides[i] = in_strides[static_cast<std::size_t>(order[i])];
  }
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const double* src = detail::ptr(x);
  if (!out.empty()) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    const auto last = static_cast<std::size_t>(rank) - 1;
    std::size_t o = 0;
    while (true) {
      std::int64_t base = 0;
      for (std::size_t d = 0; d < last; ++d) base += idx[d] * strides[d];
      for (std::int64_t j = 0; j < shape[last]; ++j) out[o++] = src[base + j * strides[last]];
      std::int64_t d = static_cast<std::int64_t>(last) - 1;
      while (d >= 0) {
        if (++idx[static_cast<std::size_t>(d)] < shape[static_cast<std::size_t>(d)]) break;
        idx[static_cast<std::size_t>(d)] = 0;
        --d;
      }
      if (d < 0) break;
    }
  }
  std::vector<std::int64_t> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[static_cast<std::size_t>(order[i])] = static_cast<std::int64_t>(i);
  return detail::record("permute", {x}, Tensor(std::move(shape), std::move(out)),
                        [inverse](const Tensor& g, const Needs&) { return Grads{permute(g, inverse)}; });
}

Tensor transpose(const Tensor& x, std::int64_t axis0, std::int64_t axis1) {
  const auto rank = x.dim();
  axis0 = normalize_axis(axis0, rank, "transpose");
  axis1 = normalize_axis(axis1, rank, "transpose");
  std::vector<std::int64_t> order(static_cast<std::size_t>(rank));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[static_cast<std::size_t>(axis0)], order[static_cast<std::size_t>(axis1)]);
  return permute(x, std::move(order));
}

Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t end) {
  axis = normalize_axis(axis, x.dim(), "slice");
  const auto full = x.shape()[static_cast<std::size_t>(axis)];
  if (start < 0 || end > full || start > end) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) + ") invalid for axis of extent " +
                     std::to_string(full) + " in " + to_string(x.shape()));
  }
  Shape shape = x.shape();
  const auto len = end - start;
  shape[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
  std::vector<double> out(static_cast<std::size_t>(numel(shape)));
  const double* src = detail::ptr(x);
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(src + (o * full + start) * inner, len * inner, out.data() + o * len * inner);
  }
  return detail::record("slice", {x}, Tensor(std::move(shape), std::move(out)),
                        [axis, start, full](const Tensor& g, const Needs&) { return Grads{embed(g, axis, start, full)}; });
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = normalize_axis(axis, parts[0].dim(), "concat");
  Shape shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw ShapeError(detail::shape_pair("concat", parts[0].shape(), p.shape()));
    probe[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
    if (probe != shape) throw ShapeError(detail::shape_pair("concat", parts[0].shape(), p.shape()));
    total += p.shape()[static_cast<std::size_t>(axis)];
  }
  shape[static_cast<std::size_t>(axis)] = total;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
  std::vector<double> out(static_cast<std::size_t>(numel(shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const auto len = p.shape()[static_cast<std::size_t>(axis)];
    const double* src = detail::ptr(p);
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * len * inner, len * inner, out.data() + (o * total + offset) * inner);
    }
    offsets.push_back(offset);
    offset += len;
  }
  offsets.push_back(total);
  return detail::record("concat", parts, Tensor(std::move(shape), std::move(out)),
                        [axis, offsets](const Tensor& g, const Needs& n) {
                          Grads grads(n.size());
                          for (std::size_t i = 0; i < n.size(); ++i) {
                            if (n[i]) grads[i] = slice(g, axis, offsets[i], offsets[i + 1]);
                          }
                          return grads;
                        });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (x.shape().size() > shape.size() || detail::broadcast_shape(x.shape(), shape, "broadcast_to") != shape) {
    throw ShapeError(detail::shape_pair("broadcast_to", x.shape(), shape));
  }
  std::vector<double> out(static_cast<std::size_t>(numel(shape)));
  const auto v = x.values();
  detail::broadcast_loop(shape, x.shape(), shape, [&](std::int64_t ia, std::int64_t, std::int64_t o) {
    out[static_cast<std::size_t>(o)] = v[static_cast<std::size_t>(ia)];
  });
  return detail::record("broadcast_to", {x}, Tensor(shape, std::move(out)),
                        [from = x.shape()](const Tensor& g, const Needs&) { return Grads{sum_to(g, from)}; });
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  const auto& from = x.shape();
  if (shape.size() > from.size()) throw ShapeError(detail::shape_pair("sum_to", from, shape));
  const auto lead = from.size() - shape.size();
  std::vector<std::int64_t> axes;
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (i < lead) {
      axes.push_back(static_cast<std::int64_t>(i));
    } else if (shape[i - lead] == 1 && from[i] != 1) {
      axes.push_back(static_cast<std::int64_t>(i));
    } else if (shape[i - lead] != from[i]) {
      throw ShapeError(detail::shape_pair("sum_to", from, shape));
    }
  }
  if (axes.empty()) return reshape(x, shape);
  return reshape(sum(x, axes, true), shape);
}

Tensor sum(const Tensor& x, std::vector<std::int64_t> axes, bool keepdim) {
  axes = normalize_axes(std::move(axes), x.dim(), "sum");
  const Shape kept = keepdim_shape(x.shape(), axes);
  std::vector<double> out(static_cast<std::size_t>(numel(kept)), 0.0);
  const auto v = x.values();
  if (out.size() == 1) {
    double acc = 0.0;
    for (double e : v) acc += e;
    out[0] = acc;
  } else {
    reduce_loop(x.shape(), axes, [&](std::int64_t in, std::int64_t o) {
      out[static_cast<std::size_t>(o)] += v[static_cast<std::size_t>(in)];
    });
  }
  Shape shape = keepdim ? kept : squeezed_shape(x.shape(), axes);
  return detail::record("sum", {x}, Tensor(std::move(shape), std::move(out)),
                        [from = x.shape(), kept](const Tensor& g, const Needs&) {
                          return Grads{broadcast_to(reshape(g, kept), from)};
                        });
}

Tensor mean(const Tensor& x, std::vector<std::int64_t> axes, bool keepdim) {
  axes = normalize_axes(std::move(axes), x.dim(), "mean");
  std::int64_t count = 1;
  for (auto a : axes) count *= x.shape()[static_cast<std::size_t>(a)];
  if (count == 0) throw ShapeError("mean: reduction over an empty axis in " + to_string(x.shape()));
  return scale(sum(x, axes, keepdim), 1.0 / static_cast<double>(count));
}

Tensor max(const Tensor& x, std::vector<std::int64_t> axes, bool keepdim) {
  return reduce_select(x, std::move(axes), keepdim, true, "max");
}

Tensor min(const Tensor& x, std::vector<std::int64_t> axes, bool keepdim) {
  return reduce_select(x, std::move(axes), keepdim, false, "min");
}

Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> index, Shape shape) {
  if (numel(shape) != static_cast<std::int64_t>(index->size())) {
    throw ShapeError("gather: index count " + std::to_string(index->size()) + " does not match shape " + to_string(shape));
  }
  const auto v = x.values();
  std::vector<double> out(index->size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = v[static_cast<std::size_t>((*index)[j])];
  return detail::record("gather", {x}, Tensor(std::move(shape), std::move(out)),
                        [index, from = x.shape()](const Tensor& g, const Needs&) {
                          return Grads{scatter_add(g, index, from)};
                        });
}

Tensor scatter_add(const Tensor& g, std::shared_ptr<const std::vector<std::int64_t>> index, Shape shape) {
  if (g.numel() != static_cast<std::int64_t>(index->size())) {
    throw ShapeError("scatter_add: index count " + std::to_string(index->size()) + " does not match " + to_string(g.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(numel(shape)), 0.0);
  const auto v = g.values();
  for (std::size_t j = 0; j < index->size(); ++j) out[static_cast<std::size_t>((*index)[j])] += v[j];
  return detail::record("scatter_add", {g}, Tensor(std::move(shape), std::move(out)),
                        [index, from = g.shape()](const Tensor& gg, const Needs&) {
                          return Grads{gather(gg, index, from)};
                        });
}

}  // namespace xalign
