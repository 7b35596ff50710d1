#include "xalign/tensor.hpp"

#include <sstream>

namespace xalign {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) {
    if (extent < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= extent;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<std::int64_t> strides_of(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i) {
    strides[static_cast<std::size_t>(i)] = strides[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
  }
  return strides;
}

std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank, const char* op) {
  const std::int64_t a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(static_cast<std::size_t>(xalign::numel(shape_)), fill)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (xalign::numel(shape_) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " holds " + std::to_string(xalign::numel(shape_)) +
                     " values, got " + std::to_string(values.size()));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{static_cast<std::int64_t>(values.size())}, std::vector<double>(values));
}

std::int64_t Tensor::size(std::int64_t axis) const {
  return shape_[static_cast<std::size_t>(normalize_axis(axis, dim(), "size"))];
}

std::span<const double> Tensor::values() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

std::span<double> Tensor::mutable_values() {
  if (graph_ != nullptr) throw std::logic_error("mutable_values: tensor is recorded in a graph");
  if (!data_) return {};
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
  return {data_->data(), data_->size()};
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: expected a single element, shape is " + to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

namespace detail {

Tensor TensorAccess::alias(const Tensor& t, Shape shape) {
  if (xalign::numel(shape) != t.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(t.shape()) + " as " + to_string(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = t.data_;
  return out;
}

const std::vector<double>& TensorAccess::buffer(const Tensor& t) { return *t.data_; }

}  // namespace detail

}  // namespace xalign
