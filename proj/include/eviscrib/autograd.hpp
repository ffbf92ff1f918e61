#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "eviscrib/tensor.hpp"

namespace eviscrib {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode graph. `backward_fn` reads `grad` and
/// accumulates into the parents' gradients; it must not capture its own node.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, zero-initialized on first use.
  Tensor& grad_buffer();
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient, or an empty tensor when nothing flowed into this node.
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor(); }
  const NodePtr& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  /// Reverse sweep from a single-element value.
  void backward() const;

 private:
  NodePtr node_;
};

/// Builds an op output. Parents and the backward closure are only kept when
/// some parent requires a gradient and grad mode is enabled.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Same value, cut from the graph.
Var detach(const Var& v);

bool grad_enabled();

/// Disables graph construction for its lifetime (evaluation paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace eviscrib
