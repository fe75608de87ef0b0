#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "cacl/common.hpp"

// Dense tensors with reverse-mode autodiff. A Tensor is a handle to a graph
// node; ops record a backward closure when any input tracks gradients and
// gradient mode is on. Graphs are rebuilt every step and freed wholesale.
namespace cacl {

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::int64_t numel_of(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor", "nonpositive dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

namespace detail {
inline int& nograd_depth() {
  thread_local int depth = 0;
  return depth;
}
inline std::uint64_t next_node_id() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}
}  // namespace detail

inline bool grad_enabled() { return detail::nograd_depth() == 0; }

// Scoped gradient-tracking suppression (momentum-encoder forwards, eval).
struct NoGrad {
  NoGrad() { ++detail::nograd_depth(); }
  ~NoGrad() { --detail::nograd_depth(); }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

template <class R>
struct Node {
  std::vector<int> shape;
  std::vector<R> value;
  std::vector<R> grad;  // empty until touched by backward
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // reads this node's grad and accumulates into parents' grads
  std::function<void(Node&)> backprop;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), R(0));
  }
};

template <class R = double>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    return filled(std::move(shape), R(0));
  }

  static Tensor filled(std::vector<int> shape, R v) {
    auto n = std::make_shared<Node<R>>();
    n->value.assign(static_cast<std::size_t>(numel_of(shape)), v);
    n->shape = std::move(shape);
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<int> shape, std::vector<R> data) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
      throw ShapeError("tensor", "data length " + std::to_string(data.size()) +
                                     " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<R>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor scalar(R v) { return from({1}, {v}); }

  // gradient-tracked leaf (a trainable parameter)
  static Tensor param(std::vector<int> shape, std::vector<R> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<R>& data() const { return node_->value; }
  std::vector<R>& mutable_data() { return node_->value; }

  const std::vector<R>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), R(0));
  }

  R item() const {
    if (numel() != 1)
      throw ShapeError("item", "expected scalar, got " + shape_str(shape()));
    return node_->value[0];
  }

  std::shared_ptr<Node<R>> node() const { return node_; }

  explicit Tensor(std::shared_ptr<Node<R>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node<R>> node_;
};

namespace detail {

template <class R>
void check_finite(const char* op, const std::vector<R>& v) {
  for (R x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericFault(std::string(op) + " produced a non-finite value");
  }
}

// Assembles an op result: runs the finiteness guard and records the backward
// closure only when tracking is on and some input tracks gradients.
template <class R>
Tensor<R> make_result(const char* op, std::vector<int> shape, std::vector<R> value,
                      std::initializer_list<Tensor<R>> inputs,
                      std::function<void(Node<R>&)> backprop) {
  if (static_cast<std::int64_t>(value.size()) != numel_of(shape))
    throw ShapeError(op, "internal: result buffer does not match " + shape_str(shape));
  check_finite(op, value);
  auto n = std::make_shared<Node<R>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = next_node_id();
  bool track = grad_enabled();
  if (track) {
    track = false;
    for (const auto& t : inputs) track = track || t.requires_grad();
  }
  if (track) {
    n->requires_grad = true;
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backprop = std::move(backprop);
  }
  return Tensor<R>(std::move(n));
}

}  // namespace detail

// Reverse accumulation from a scalar loss. Intermediate grads are cleared on
// every call; leaf (parameter) grads accumulate across calls.
template <class R>
void backward(const Tensor<R>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward", "loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // reachable subgraph, then reverse creation order = reverse topological
  std::vector<Node<R>*> order;
  std::vector<Node<R>*> stack{loss.node().get()};
  std::unordered_set<Node<R>*> seen;
  while (!stack.empty()) {
    Node<R>* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node<R>* a, const Node<R>* b) { return a->id > b->id; });

  for (Node<R>* n : order) {
    n->ensure_grad();
    if (n->backprop) std::fill(n->grad.begin(), n->grad.end(), R(0));
  }
  loss.node()->grad[0] = R(1);
  for (Node<R>* n : order) {
    if (n->backprop) n->backprop(*n);
  }
}

}  // namespace cacl
