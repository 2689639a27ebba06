#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "unirep/errors.hpp"

namespace unirep {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T{0});
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major n-d array with optional reverse-mode gradient.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values
/// produced by an op are never modified afterwards. The only mutable
/// tensors are leaves (parameters), written by the optimizer.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " elements but data has " +
                       std::to_string(data.size()));
    }
    node_ = std::make_shared<detail::Node<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  // Builds the result of an op; records the graph only when needed.
  static Tensor make_result(Shape shape, std::vector<T> data, std::vector<Tensor> inputs,
                            std::function<void(detail::Node<T>&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    if (grad_enabled()) {
      bool any = false;
      for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
      if (any) {
        out.node_->requires_grad = true;
        for (auto& in : inputs) out.node_->parents.push_back(in.node_);
        out.node_->backward_fn = std::move(backward);
      }
    }
    return out;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Leaf-only write access (parameters, test fixtures).
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  // Shares data, drops history.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }

  // Same data viewed with a new shape of equal element count (differentiable).
  Tensor reshape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape: " + shape_str(this->shape()) + " -> " + shape_str(shape));
    }
    return make_result(std::move(shape), node_->data, {*this}, [](detail::Node<T>& self) {
      auto& p = *self.parents[0];
      if (!p.requires_grad) return;
      p.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
  }

  /// Reverse-mode sweep from this (scalar) tensor. Gradients accumulate into
  /// every reachable node that requires grad.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward: root must be a scalar, got " + shape_str(shape()));
    if (!requires_grad()) return;
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        auto* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      auto* n = *it;
      if (n->backward_fn) {
        n->ensure_grad();
        n->backward_fn(*n);
      }
    }
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

template <class T>
std::vector<double> to_double(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace unirep
