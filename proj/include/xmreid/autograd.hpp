#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "xmreid/tensor.hpp"

namespace xmreid {

/// One vertex of the dynamic computation graph.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  Tensor& ensure_grad();
};

/// Handle to a graph node. Copies alias the same node, so two Vars compare
/// equal in storage exactly when they are the same parameter.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  /// Direct write access for optimizers and loaders; only meaningful on leaves.
  Tensor& mutable_value() { return node_->value; }
  Tensor& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return defined() && !node_->grad.empty(); }
  bool requires_grad() const { return defined() && node_->requires_grad; }
  void zero_grad();

  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  Real item() const { return node_->value.item(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  bool same_storage(const Var& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a result node. When grad recording is off or no input requires a
/// gradient, the node is a constant and `backward` is dropped.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Reverse-mode sweep from a scalar root; accumulates into leaf grads.
void backward(const Var& root);

/// Same value, cut from the graph.
Var detach(const Var& v);

bool grad_enabled();

/// Disables graph recording for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace xmreid
