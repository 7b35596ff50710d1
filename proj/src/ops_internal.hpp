#pragma once

#include <string>
#include <vector>

#include "xalign/ops.hpp"

namespace xalign::detail {

inline const double* ptr(const Tensor& t) { return TensorAccess::buffer(t).data(); }

inline std::string shape_pair(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op);

/// Strides of `shape` laid against an output of rank `rank`, with zero
/// stride on broadcast (size-1 or missing) axes.
std::vector<std::int64_t> aligned_strides(const Shape& shape, std::size_t rank);

/// Calls f(offset_a, offset_b, offset_out) for every element of `out`.
template <class F>
void broadcast_loop(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const auto rank = out.size();
  if (numel(out) == 0) return;
  if (rank == 0) {
    f(std::int64_t{0}, std::int64_t{0}, std::int64_t{0});
    return;
  }
  const auto sa = aligned_strides(a, rank);
  const auto sb = aligned_strides(b, rank);
  const auto inner = out[rank - 1];
  const auto ia_step = sa[rank - 1];
  const auto ib_step = sb[rank - 1];
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t o = 0;
  while (true) {
    std::int64_t ia = 0, ib = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      ia += idx[d] * sa[d];
      ib += idx[d] * sb[d];
    }
    for (std::int64_t j = 0; j < inner; ++j) f(ia + j * ia_step, ib + j * ib_step, o++);
    std::int64_t d = static_cast<std::int64_t>(rank) - 2;
    while (d >= 0) {
      if (++idx[static_cast<std::size_t>(d)] < out[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
      --d;
    }
    if (d < 0) break;
  }
}

/// Maps a tensor elementwise into a new constant.
template <class F>
Tensor map_values(const Tensor& x, F&& f) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Tensor(x.shape(), std::move(out));
}

}  // namespace xalign::detail
