// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision tensors with a define-by-run reverse-mode tape.
//
// A Tensor is a shared handle to a graph node. Operations (see ops.hpp)
// record their inputs and a backward closure only when gradient recording
// is enabled and at least one input requires a gradient, so inference under
// NoGradGuard allocates no graph.
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

#include "roadformer/errors.hpp"

namespace roadformer {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  std::vector<double> value;
  std::vector<double> grad;
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    if (values.size() != shape_numel(shape)) {
      throw InputError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape));
    }
    node_->value = std::move(values);
    node_->shape = std::move(shape);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  /// Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> values_mut() { return node_->value; }
  const std::vector<double>& vec() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (numel() != 1) throw InputError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Empty span when no gradient has reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  Tensor detach() const { return Tensor(node_->shape, node_->value); }

  /// Seeds d(this)/d(this) = 1 and propagates to every reachable leaf.
  void backward() const {
    if (numel() != 1) throw InputError("backward() requires a scalar, got " + shape_str(shape()));
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Wraps a freshly computed value as the output of an op. `backward` receives
/// the output node and must accumulate into the inputs' gradients via grad_of().
inline Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(value));
  if (!grad_mode()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  for (const auto& t : inputs) {
    if (t.requires_grad()) n.parents.push_back(t.node());
  }
  n.backward = std::move(backward);
  return out;
}

inline Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(value));
  if (!grad_mode()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  for (const auto& t : inputs) {
    if (t.requires_grad()) n.parents.push_back(t.node());
  }
  n.backward = std::move(backward);
  return out;
}

/// Gradient buffer of `t`, or nullptr when `t` does not take gradients.
inline double* grad_of(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  return t.node()->ensure_grad().data();
}

}  // namespace detail
}  // namespace roadformer
