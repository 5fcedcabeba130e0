// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/core/autograd.hpp"

#include "peer/core/error.hpp"

namespace peer {

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Tensor& Var::grad() const {
  if (node_->grad.empty() && !node_->value.empty()) {
    node_->grad = Tensor::zeros_like(node_->value);
  }
  return node_->grad;
}

void Var::zero_grad() const {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

bool Tape::needs_grad(std::initializer_list<const Var*> inputs) const {
  if (!enabled_) return false;
  for (const Var* v : inputs) {
    if (v && v->requires_grad()) return true;
  }
  return false;
}

bool Tape::needs_grad(std::span<const Var> inputs) const {
  if (!enabled_) return false;
  for (const Var& v : inputs) {
    if (v.requires_grad()) return true;
  }
  return false;
}

Var Tape::output(Tensor value, bool track) {
  return track ? Var::parameter(std::move(value)) : Var::constant(std::move(value));
}

void Tape::record(std::function<void()> adjoint) {
  if (enabled_) adjoints_.push_back(std::move(adjoint));
}

void Tape::backward(const Var& root) {
  if (root.value().numel() != 1) {
    throw DimensionError("backward() needs a scalar root, got shape " +
                         shape_str(root.shape()));
  }
  backward(root, Tensor(root.shape(), 1.0));
}

void Tape::backward(const Var& root, const Tensor& upstream) {
  if (!enabled_) throw StateError("backward() on a disabled tape");
  if (!root.requires_grad()) throw StateError("backward() root does not require grad");
  if (upstream.shape() != root.shape()) {
    throw DimensionError("upstream gradient " + shape_str(upstream.shape()) +
                         " does not match root " + shape_str(root.shape()));
  }
  Tensor& g = root.grad();
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += upstream[i];
  replay();
}

void Tape::replay() {
  for (auto it = adjoints_.rbegin(); it != adjoints_.rend(); ++it) (*it)();
}

}  // namespace peer
