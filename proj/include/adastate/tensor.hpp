// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace adastate {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// One vertex of the reverse-mode graph. Leaves own their value; interior
// nodes additionally keep their parents alive and a closure that pushes
// `grad` into the parents' grad buffers.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool retain_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major array of doubles with an optional link into the
/// autodiff graph. Copies share storage and graph identity (handle
/// semantics); use `clone()` for an independent copy.
class Tensor {
 public:
  Tensor() : Tensor(Shape{0}, std::vector<double>{}) {}

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, {v}, requires_grad);
  }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  /// Writable view of the values. Only meaningful on leaves: mutating a
  /// tensor that an existing graph has saved invalidates that graph.
  std::span<double> mutable_data() { return node_->value; }

  double item() const {
    if (numel() != 1) {
      throw ShapeError("item: expected a single element, shape " +
                       shape_str(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  const char* op_name() const { return node_->op; }

  Tensor& set_requires_grad(bool flag) {
    if (!node_->leaf) throw std::logic_error("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && numel() > 0; }
  std::span<const double> grad() const {
    if (!has_grad()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
  }
  Tensor grad_tensor() const {
    auto g = grad();
    return Tensor(shape(), std::vector<double>(g.begin(), g.end()));
  }
  void zero_grad() { node_->grad.clear(); }
  /// Keeps this interior node's gradient after backward (leaves always do).
  Tensor& retain_grad() {
    node_->retain_grad = true;
    return *this;
  }

  /// Same values, no graph link.
  Tensor detach() const { return Tensor(shape(), node_->value); }
  /// Independent copy that keeps the requires_grad flag (as a fresh leaf).
  Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal: used by the op library to build graph nodes.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Creates the output node of a primitive. The backward closure is attached
// only when recording is enabled and some input requires grad.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace detail

/// Reverse-topological record of every graph node reachable from an
/// output. `backward` visits each recorded node exactly once.
class Tape {
 public:
  explicit Tape(const Tensor& output) : root_(output.node()) {
    if (!root_->requires_grad) return;
    // Iterative post-order DFS; post-order over parents is a topological order.
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root_.get(), 0);
    seen.insert(root_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
    std::reverse(order_.begin(), order_.end());
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<detail::Node*>& order() const { return order_; }

  /// Seeds d(output)/d(output) = 1 and propagates. Interior gradient buffers
  /// are released afterwards; leaf gradients accumulate across calls.
  void backward(const std::function<void(const detail::Node&)>& on_visit = {}) {
    if (order_.empty()) return;
    auto& g = root_->grad_buffer();
    if (root_->leaf) {
      for (auto& x : g) x += 1.0;
    } else {
      std::fill(g.begin(), g.end(), 1.0);
    }
    for (detail::Node* node : order_) {
      if (on_visit) on_visit(*node);
      if (!node->leaf && node->backward) {
        node->grad_buffer();
        node->backward(*node);
        if (!node->retain_grad) {
          node->grad.clear();
          node->grad.shrink_to_fit();
        }
      }
    }
  }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
};

/// Accumulates d(output)/d(leaf) into every reachable leaf that requires grad.
inline void backward(const Tensor& output) {
  if (output.numel() != 1) {
    throw ShapeError("backward: output must be a scalar, got shape " +
                     shape_str(output.shape()));
  }
  Tape(output).backward();
}

}  // namespace adastate
