#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sleepdg/errors.hpp"

namespace sleepdg::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <class T>
struct Node;

/// Propagates the gradient of a node's output into its parents. `parent_grads[i]`
/// is null when parent i does not take part in differentiation.
template <class T>
using BackwardFn = std::function<void(const Node<T>& self, std::span<const T> grad_out,
                                      std::span<std::vector<T>*> parent_grads)>;

/// One vertex of the computation graph. Values are fixed once the node exists;
/// the only exception is a leaf parameter rewritten by an optimizer between passes.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn<T> backward;
  std::vector<T> saved;
};

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Shared handle to an immutable n-dimensional array in a (possibly empty)
/// computation graph. Copies alias the same node.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                       std::to_string(numel(shape)) + " elements, got " +
                       std::to_string(values.size()));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->id = detail::next_node_id();
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T fill) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<T>(n, fill));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  const char* op() const { return node_->op; }

  T item() const {
    if (node_->value.size() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(node_->shape));
    }
    return node_->value[0];
  }

  T operator[](std::size_t flat) const { return node_->value[flat]; }

  /// Writable storage of a leaf. Used by optimizers and checkpoint loading only.
  std::span<T> mutable_leaf_data() {
    if (!is_leaf()) throw ContractError("mutable_leaf_data() on an interior graph node");
    return node_->value;
  }

  /// A fresh leaf with a copy of this tensor's values and no history.
  Tensor detach(bool requires_grad = false) const {
    return from(node_->shape, node_->value, requires_grad);
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds the result of a primitive. A graph node is recorded only when
/// recording is enabled and at least one input requires a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::initializer_list<Tensor<T>> inputs, BackwardFn<T> backward,
                      std::vector<T> saved = {}) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = detail::next_node_id();
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
    node->saved = std::move(saved);
  }
  return Tensor<T>(std::move(node));
}

/// Variadic-input flavour of make_result (concatenate and friends).
template <class T>
Tensor<T> make_result_n(Shape shape, std::vector<T> value, const char* op,
                        std::span<const Tensor<T>> inputs, BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = detail::next_node_id();
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

/// Topologically ordered view of every differentiable node reachable from a root.
/// Node ids grow with creation order and an output is always created after its
/// inputs, so descending id order is a valid reverse topological order.
template <class T>
class Graph {
 public:
  explicit Graph(const Tensor<T>& root) {
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> stack{root.node().get()};
    std::unordered_map<const Node<T>*, bool> seen;
    seen[root.node().get()] = true;
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      nodes_.push_back(n);
      for (const auto& p : n->parents) {
        if (p->requires_grad && !seen[p.get()]) {
          seen[p.get()] = true;
          stack.push_back(p.get());
        }
      }
    }
    std::sort(nodes_.begin(), nodes_.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });
  }

  /// Nodes from the root back towards the leaves.
  const std::vector<Node<T>*>& reverse_order() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node<T>*> nodes_;
};

/// Gradients of a scalar with respect to every requires-grad leaf it depends on.
template <class T>
class Gradients {
 public:
  bool contains(const Tensor<T>& t) const { return grads_.count(t.node().get()) != 0; }

  /// Gradient as a tensor; leaves the loss never reached get exact zeros.
  Tensor<T> of(const Tensor<T>& t) const {
    auto it = grads_.find(t.node().get());
    if (it == grads_.end()) return Tensor<T>::zeros(t.shape());
    return Tensor<T>::from(t.shape(), it->second);
  }

  std::span<const T> raw(const Tensor<T>& t) const {
    auto it = grads_.find(t.node().get());
    if (it == grads_.end()) {
      throw ContractError("no gradient recorded for tensor of shape " + to_string(t.shape()));
    }
    return it->second;
  }

  std::size_t size() const { return grads_.size(); }

  void insert(const Node<T>* node, std::vector<T> grad) { grads_[node] = std::move(grad); }

 private:
  std::unordered_map<const Node<T>*, std::vector<T>> grads_;
};

/// Reverse-mode sweep from a scalar loss. Interior gradients are released as
/// soon as they have been propagated; leaf gradients are returned.
template <class T>
Gradients<T> backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  Gradients<T> result;
  if (!loss.requires_grad()) return result;

  Graph<T> graph(loss);
  std::unordered_map<const Node<T>*, std::vector<T>> pending;
  pending[loss.node().get()] = std::vector<T>{T(1)};

  std::vector<std::vector<T>*> parent_ptrs;
  for (Node<T>* n : graph.reverse_order()) {
    auto it = pending.find(n);
    if (it == pending.end()) continue;
    std::vector<T> grad = std::move(it->second);
    pending.erase(it);
    if (n->parents.empty()) {
      result.insert(n, std::move(grad));
      continue;
    }
    parent_ptrs.assign(n->parents.size(), nullptr);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      Node<T>* p = n->parents[i].get();
      if (!p->requires_grad) continue;
      auto& buf = pending[p];
      if (buf.empty()) buf.assign(p->value.size(), T(0));
      parent_ptrs[i] = &buf;
    }
    n->backward(*n, grad, parent_ptrs);
  }
  return result;
}

}  // namespace sleepdg::ad
