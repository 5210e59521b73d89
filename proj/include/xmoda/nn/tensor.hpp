#pragma once

// Minimal reverse-mode autograd over float32 tensors.
//
// A Tensor is a shared handle to a Node holding a value, an optional
// gradient, its parent nodes and a closure that pushes the node's gradient
// into the parents. Graphs are built eagerly by the ops in ops.hpp and are
// released when the last handle goes away. Gradients of leaf tensors
// (parameters) accumulate across backward() calls until zero_grad().

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xmoda/error.hpp"
#include "xmoda/ndarray.hpp"

namespace xmoda::nn {

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph construction in its scope (inference, target branches).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      throw Error(Errc::ShapeMismatch, "tensor payload does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto count = static_cast<std::size_t>(shape_numel(shape));
    return from(std::move(shape), std::vector<float>(count, 0.0f), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::vector<float>& value() { return node_->value; }
  const std::vector<float>& value() const { return node_->value; }
  std::vector<float>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  void zero_grad() { node_->grad.clear(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  /// A leaf sharing no history with this tensor.
  Tensor detach() const { return from(node_->shape, node_->value, false); }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates the output node of an op. The closure is attached only when grad
/// mode is on and some parent requires a gradient.
inline Tensor make_result(Shape shape, std::vector<float> value, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    const bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      for (auto& p : parents) n->parents.push_back(p.node_ptr());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(n));
}

/// Runs reverse accumulation from several roots at once. Each seed supplies
/// dL/d(root). Intermediate gradients are released after use; leaf
/// gradients accumulate.
inline void backward(const std::vector<std::pair<Tensor, std::vector<float>>>& seeds) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack;
  for (const auto& [t, g] : seeds) {
    if (!t.requires_grad()) continue;
    if (static_cast<std::int64_t>(g.size()) != t.numel())
      throw Error(Errc::ShapeMismatch, "seed gradient size does not match root");
    if (visited.insert(t.node()).second) stack.emplace_back(t.node(), 0);
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node* p = n->parents[i++].get();
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }
  for (const auto& [t, g] : seeds) {
    if (!t.requires_grad()) continue;
    Node* n = t.node();
    n->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward_fn) continue;  // leaf
    if (n->grad.size() != n->value.size()) continue;  // no gradient reached this node
    for (auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();
    n->backward_fn(*n);
    std::vector<float>().swap(n->grad);
  }
}

inline void backward(const Tensor& root, std::vector<float> seed) { backward({{root, std::move(seed)}}); }

}  // namespace xmoda::nn
