#include "xalign/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace xalign {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor probe = x.detach();
  std::vector<double> grad(static_cast<std::size_t>(x.numel()));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double original = x.values()[i];
    probe.mutable_values()[i] = original + step;
    const double up = f(probe);
    probe.mutable_values()[i] = original - step;
    const double down = f(probe);
    probe.mutable_values()[i] = original;
    grad[i] = (up - down) / (2.0 * step);
  }
  return Tensor(x.shape(), std::move(grad));
}

double relative_error(const Tensor& actual, const Tensor& expected, double floor) {
  if (actual.shape() != expected.shape()) {
    throw ShapeError("relative_error: shapes " + to_string(actual.shape()) + " and " + to_string(expected.shape()));
  }
  double scale = floor;
  double worst = 0.0;
  const auto a = actual.values();
  const auto e = expected.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::fabs(e[i]));
    worst = std::max(worst, std::fabs(a[i] - e[i]));
  }
  return worst / scale;
}

}  // namespace xalign
