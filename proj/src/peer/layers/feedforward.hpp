// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "peer/core/autograd.hpp"
#include "peer/core/op_counter.hpp"
#include "peer/core/ops.hpp"

namespace peer {

struct ParamRef {
  std::string name;
  Var var;
};

// Non-trainable state that still belongs in a checkpoint (BN running stats).
struct BufferRef {
  std::string name;
  Tensor* tensor;
};

/// Expert/memory selections of one forward pass, flattened as [token][head][k].
struct Routing {
  std::size_t tokens = 0;
  std::size_t heads = 0;
  std::size_t k = 0;
  std::vector<std::uint64_t> indices;
  std::vector<double> weights;  // normalized router scores g

  std::size_t size() const { return indices.size(); }
};

struct LayerContext {
  OpCounter* counter = nullptr;
  // When set, routing layers echo their selections here.
  Routing* routing = nullptr;
};

/// Common contract of every layer that can stand in for a transformer FFW:
/// input [..., d_model] maps to an output of identical shape.
class FeedForward {
 public:
  virtual ~FeedForward() = default;

  virtual std::string_view kind() const = 0;
  virtual std::size_t d_model() const = 0;
  virtual Var forward(Tape& tape, const Var& x, Mode mode, const LayerContext& ctx = {}) = 0;
  virtual std::vector<ParamRef> parameters() = 0;
  virtual std::vector<BufferRef> buffers() { return {}; }
};

}  // namespace peer
