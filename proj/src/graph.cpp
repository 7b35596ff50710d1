#include "xalign/graph.hpp"

#include <stdexcept>

#include "xalign/ops.hpp"

namespace xalign {

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

GradModeGuard::GradModeGuard(bool enabled) : previous_(t_grad_enabled) { t_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { t_grad_enabled = previous_; }

Tensor record(const char* op, const std::vector<Tensor>& inputs, Tensor result, BackwardFn fn) {
  if (!t_grad_enabled) return result;
  Graph* graph = nullptr;
  for (const auto& input : inputs) {
    if (!input.requires_grad()) continue;
    if (graph != nullptr && graph != input.graph()) {
      throw std::invalid_argument(std::string(op) + ": inputs belong to different graphs");
    }
    graph = input.graph();
  }
  if (graph == nullptr) return result;
  return graph->record(op, inputs, std::move(result), std::move(fn));
}

}  // namespace detail

Tensor Graph::leaf(const Tensor& value, bool requires_grad) {
  Tensor t = value.detach();
  if (!requires_grad) return t;
  if (released_) throw std::logic_error("graph already released by a previous backward pass");
  nodes_.push_back(Node{"leaf", {}, {}});
  t.graph_ = this;
  t.node_ = static_cast<std::int64_t>(nodes_.size()) - 1;
  return t;
}

Tensor Graph::record(std::string op, const std::vector<Tensor>& inputs, Tensor result, detail::BackwardFn fn) {
  if (released_) throw std::logic_error(op + ": graph already released by a previous backward pass");
  Node node{std::move(op), {}, std::move(fn)};
  node.parents.reserve(inputs.size());
  for (const auto& input : inputs) node.parents.push_back(input.graph() == this ? input.node() : -1);
  nodes_.push_back(std::move(node));
  result.graph_ = this;
  result.node_ = static_cast<std::int64_t>(nodes_.size()) - 1;
  return result;
}

void Graph::release() {
  for (auto& node : nodes_) node.backward = nullptr;
  released_ = true;
}

Tensor GradMap::get(const Tensor& target) const {
  auto it = grads_.find(target.node());
  if (it == grads_.end()) return Tensor::zeros(target.shape());
  return it->second;
}

bool GradMap::contains(const Tensor& target) const { return grads_.count(target.node()) != 0; }

GradMap backward(const Tensor& output, std::initializer_list<Tensor> targets, bool create_graph) {
  return backward(output, std::span<const Tensor>(targets.begin(), targets.size()), create_graph);
}

GradMap backward(const Tensor& output, std::span<const Tensor> targets, bool create_graph) {
  if (output.numel() != 1) {
    throw std::invalid_argument("backward: output must be a scalar but has shape " + to_string(output.shape()) +
                                "; reduce it first (sum or mean)");
  }
  for (const auto& target : targets) {
    if (!target.requires_grad()) throw std::invalid_argument("backward: target does not require grad");
  }
  GradMap result;
  Graph* graph = output.graph();
  if (graph == nullptr) return result;
  if (graph->released_) throw std::logic_error("backward: graph already released by a previous backward pass");
  for (const auto& target : targets) {
    if (target.graph() != graph) throw std::invalid_argument("backward: target belongs to a different graph");
  }

  const auto count = static_cast<std::size_t>(output.node()) + 1;
  // reaches[i]: node i depends on some target, so its adjoint is worth propagating.
  std::vector<bool> reaches(count, false);
  std::vector<bool> is_target(count, false);
  for (const auto& target : targets) {
    const auto t = static_cast<std::size_t>(target.node());
    if (t < count) reaches[t] = is_target[t] = true;
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (reaches[i]) continue;
    for (auto p : graph->nodes_[i].parents) {
      if (p >= 0 && reaches[static_cast<std::size_t>(p)]) {
        reaches[i] = true;
        break;
      }
    }
  }

  detail::GradModeGuard mode(create_graph);
  std::vector<Tensor> adjoints(count);
  adjoints[count - 1] = Tensor::ones(output.shape());
  for (std::size_t i = count; i-- > 0;) {
    if (!reaches[i] || !adjoints[i].defined()) continue;
    const auto& node = graph->nodes_[i];
    if (!node.backward) continue;
    detail::Needs needs(node.parents.size());
    bool any = false;
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const auto p = node.parents[k];
      needs[k] = p >= 0 && reaches[static_cast<std::size_t>(p)];
      any = any || needs[k];
    }
    if (!any) continue;
    auto grads = node.backward(adjoints[i], needs);
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      if (!needs[k] || !grads[k].defined()) continue;
      auto& slot = adjoints[static_cast<std::size_t>(node.parents[k])];
      slot = slot.defined() ? add(slot, grads[k]) : grads[k];
    }
    // Interior adjoints are no longer needed once propagated.
    if (!create_graph && !is_target[i]) adjoints[i] = Tensor();
  }
  for (const auto& target : targets) {
    const auto t = static_cast<std::size_t>(target.node());
    if (t < count && adjoints[t].defined()) result.grads_[target.node()] = adjoints[t];
  }
  if (!create_graph) graph->release();
  return result;
}

}  // namespace xalign
