#pragma once

#include <functional>

#include "xalign/tensor.hpp"

namespace xalign {

/// Central-difference gradient of a scalar function, one coordinate at a time:
/// (f(x + h e_i) - f(x - h e_i)) / 2h.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step);

/// max_i |a_i - b_i| / max(|b|_inf, floor). Used to compare gradients.
double relative_error(const Tensor& actual, const Tensor& expected, double floor = 1e-8);

}  // namespace xalign
