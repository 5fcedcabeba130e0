// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "peer/core/tensor.hpp"

namespace peer {

/// A tensor that may participate in differentiation. Copies share the same
/// underlying node, so a parameter handed to several ops accumulates the
/// gradient of every use. Like a shared_ptr, constness of the handle does not
/// propagate to the node.
class Var {
 public:
  Var() = default;

  static Var parameter(Tensor value);
  static Var constant(Tensor value);

  explicit operator bool() const { return node_ != nullptr; }

  Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Allocated as zeros on first access.
  Tensor& grad() const;
  void zero_grad() const;

  bool same_node(const Var& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
  };

  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  std::shared_ptr<Node> node_;
};

/// Ordered record of executed differentiable operations. backward() replays
/// the recorded adjoints in exact reverse order. A disabled tape records
/// nothing, which is how inference runs.
class Tape {
 public:
  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool enabled() const { return enabled_; }
  bool needs_grad(std::initializer_list<const Var*> inputs) const;
  bool needs_grad(std::span<const Var> inputs) const;

  // Creates the output variable of an op; it requires grad iff `track`.
  static Var output(Tensor value, bool track);

  void record(std::function<void()> adjoint);

  // Seeds d(root)/d(root) = 1; root must be a scalar.
  void backward(const Var& root);
  // Seeds the root gradient with an arbitrary upstream tensor.
  void backward(const Var& root, const Tensor& upstream);

  std::size_t size() const { return adjoints_.size(); }
  void clear() { adjoints_.clear(); }

 private:
  void replay();

  bool enabled_;
  std::vector<std::function<void()>> adjoints_;
};

}  // namespace peer
