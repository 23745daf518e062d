// Copyright (c) 2026 The cfpformer Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cfp/core/error.hpp"

namespace cfp {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::atomic<bool>& numeric_guard_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

}  // namespace detail

/// True while operations record a backward graph on this thread.
inline bool grad_enabled() { return detail::grad_mode(); }

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

/// Debug guard: when on, every op checks its output for NaN/Inf and throws a
/// NumericError naming the op.
inline void set_numeric_guard(bool on) { detail::numeric_guard_flag() = on; }
inline bool numeric_guard() { return detail::numeric_guard_flag(); }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that require it.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Dense row-major tensor handle. Copies share the underlying node; values
/// are treated as immutable once an op has produced them, except for leaf
/// parameters which the optimizer updates in place.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (cfp::numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(cfp::numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    node->id = ++detail::node_counter();
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = cfp::numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // In-place access for parameter initialization and optimizer updates only.
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::size_t flat) const { return node_->data.at(flat); }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  std::uint64_t node_id() const { return node_->id; }
  const char* op() const { return node_->op; }

  Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

  /// Value copy that is cut from the graph.
  Tensor detach() const { return from(shape(), node_->data, false); }

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  /// calls; interior gradients are recomputed each call.
  void backward() const;

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS; decoder graphs are deep enough to make
  // recursion uncomfortable.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw UsageError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!requires_grad()) throw UsageError("backward() on a tensor that does not require grad");
  auto order = detail::topo_order(node_.get());
  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->is_leaf() && !n->grad.empty()) n->backward_fn(*n);
  }
}

/// Builds an op result and wires its backward closure when any input is
/// tracked. `fn` receives the output node and writes into input grads.
template <typename T, typename Fn>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  node->id = ++detail::node_counter();
  if (numeric_guard()) {
    for (const T& v : node->data) {
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || (in.defined() && in.requires_grad());
  }
  if (track) {
    node->requires_grad = true;
    for (const auto& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.node_ptr());
    }
    node->backward_fn = std::forward<Fn>(fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T, typename Fn>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values, std::initializer_list<Tensor<T>> inputs,
                      Fn&& fn) {
  return make_result(op, std::move(shape), std::move(values), std::vector<Tensor<T>>(inputs), std::forward<Fn>(fn));
}

/// Parameters as an ordered (name, tensor) list; order defines checkpoint
/// layout and optimizer state layout.
template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
std::size_t parameter_count(const NamedParams<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

template <typename T>
void zero_grad(NamedParams<T>& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

}  // namespace cfp
