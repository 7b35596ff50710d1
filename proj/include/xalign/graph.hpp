#pragma once

#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xalign/tensor.hpp"

namespace xalign {

namespace detail {
using Grads = std::vector<Tensor>;
using Needs = std::vector<bool>;
/// Maps the incoming adjoint to one gradient per parent. Entries whose
/// `needs` flag is false may be left undefined.
using BackwardFn = std::function<Grads(const Tensor& grad, const Needs& needs)>;
}  // namespace detail

class GradMap;
GradMap backward(const Tensor& output, std::span<const Tensor> targets, bool create_graph);

/// Append-only tape of operation records.
///
/// Parents always precede children, so reverse index order is a valid
/// topological order. Backward passes run with `create_graph` append their
/// own nodes to the same tape, which is what makes gradients of gradients
/// possible. A backward pass without `create_graph` releases the tape:
/// saved values are dropped and any further use of the graph throws.
///
/// Tensors refer to their graph by pointer; the graph must outlive them.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers `value` as a leaf. With requires_grad=false the result is a
  /// plain constant and the graph is not touched.
  Tensor leaf(const Tensor& value, bool requires_grad = true);

  std::size_t size() const { return nodes_.size(); }
  bool released() const { return released_; }
  const std::string& op_name(std::int64_t node) const { return nodes_.at(static_cast<std::size_t>(node)).op; }
  std::span<const std::int64_t> parents(std::int64_t node) const {
    return nodes_.at(static_cast<std::size_t>(node)).parents;
  }

  /// Used by op implementations: attaches `result` to a new node.
  Tensor record(std::string op, const std::vector<Tensor>& inputs, Tensor result, detail::BackwardFn fn);

 private:
  friend class GradMap;
  friend GradMap backward(const Tensor& output, std::span<const Tensor> targets, bool create_graph);

  struct Node {
    std::string op;
    std::vector<std::int64_t> parents;
    detail::BackwardFn backward;
  };

  void release();

  std::deque<Node> nodes_;  // stable references while backward appends
  bool released_ = false;
};

/// Gradients keyed by target identity (graph node). Missing entries are zero.
class GradMap {
 public:
  /// Gradient for `target`, or zeros of its shape when it was not reached.
  Tensor get(const Tensor& target) const;
  bool contains(const Tensor& target) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend GradMap backward(const Tensor& output, std::span<const Tensor> targets, bool create_graph);
  std::map<std::int64_t, Tensor> grads_;
};

/// Reverse-mode gradients of scalar `output` with respect to `targets`.
///
/// With create_graph=true the returned gradients are themselves recorded and
/// can be differentiated again; the graph stays alive. Otherwise the graph is
/// released after the pass.
GradMap backward(const Tensor& output, std::span<const Tensor> targets, bool create_graph = false);
GradMap backward(const Tensor& output, std::initializer_list<Tensor> targets, bool create_graph = false);

bool grad_enabled();

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {
/// Sets grad mode to `enabled` for its lifetime.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

/// Records `result` as produced by `op` from `inputs` when grad mode is on
/// and some input requires grad; otherwise returns it as a constant.
Tensor record(const char* op, const std::vector<Tensor>& inputs, Tensor result, BackwardFn fn);
}  // namespace detail

}  // namespace xalign
