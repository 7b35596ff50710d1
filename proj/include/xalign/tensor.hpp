#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace xalign {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand shapes violate an op's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Graph;
class Tensor;

namespace detail {
struct TensorAccess {
  /// View of `t`'s buffer under a new shape of equal element count.
  static Tensor alias(const Tensor& t, Shape shape);
  static const std::vector<double>& buffer(const Tensor& t);
};
}  // namespace detail

/// Dense row-major array of doubles.
///
/// The value buffer is shared between copies and never mutated once a tensor
/// participates in a graph, so copies behave as values. A tensor that
/// requires grad carries a reference to the node in its Graph that produced
/// it; constants carry none.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor vector(std::initializer_list<double> values);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::int64_t dim() const { return static_cast<std::int64_t>(shape_.size()); }
  /// Extent of axis `axis`; negative indices count from the back.
  std::int64_t size(std::int64_t axis) const;
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  std::span<const double> values() const;
  /// Writable view; only valid on constants. Copies the buffer if shared.
  std::span<double> mutable_values();
  double at(std::int64_t flat_index) const { return (*data_)[static_cast<std::size_t>(flat_index)]; }
  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  std::int64_t node() const { return node_; }
  /// Same values, no graph membership.
  Tensor detach() const;

 private:
  friend class Graph;
  friend struct detail::TensorAccess;

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Graph* graph_ = nullptr;
  std::int64_t node_ = -1;
};

/// Row-major strides for `shape`.
std::vector<std::int64_t> strides_of(const Shape& shape);

/// Normalizes a possibly negative axis against `rank`.
std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank, const char* op);

}  // namespace xalign
