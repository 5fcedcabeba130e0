// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "peer/core/autograd.hpp"

namespace peer {

struct OpCounter;

enum class Activation { kRelu, kGelu };
enum class Mode { kTrain, kInfer };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation act);

double activate(Activation act, double x);
double activate_grad(Activation act, double x);

// Four-way unrolled dot product. Every inner product in the retrieval path
// goes through here so that different routes round identically.
double dot(std::span<const double> a, std::span<const double> b);

/// Indices of the k largest values, ordered by (value desc, index asc).
std::vector<std::size_t> topk(std::span<const double> values, std::size_t k,
                              OpCounter* counter = nullptr);

// All ops treat a tensor as [rows x cols] over its trailing axis unless noted.

// a: [..., p], b: [p x n] -> [..., n]
Var matmul(Tape& tape, const Var& a, const Var& b);
Var add(Tape& tape, const Var& a, const Var& b);
Var mul(Tape& tape, const Var& a, const Var& b);
Var scale(Tape& tape, const Var& a, double factor);
Var relu(Tape& tape, const Var& a);
Var gelu(Tape& tape, const Var& a);
Var sigmoid(Tape& tape, const Var& a);
Var activation(Tape& tape, const Var& a, Activation act);
Var softmax(Tape& tape, const Var& a);
Var reshape(Tape& tape, const Var& a, Shape shape);
Var sum(Tape& tape, const Var& a);
// sum(a * weights) with constant weights; handy for scalarizing outputs.
Var weighted_sum(Tape& tape, const Var& a, const Tensor& weights);

// Concatenates along the trailing axis; all parts share the row count.
Var concat_cols(Tape& tape, std::span<const Var> parts);

// out[r] = table[index[r]]; adjoint is a scatter-add into the table.
Var gather_rows(Tape& tape, const Var& table, std::span<const std::size_t> index);
// out[index[r]] += src[r] into an [n_rows x cols] zero tensor; adjoint is a gather.
Var scatter_add_rows(Tape& tape, const Var& src, std::span<const std::size_t> index,
                     std::size_t n_rows);
// out[r] = a.data()[flat_index[r]], shape [len].
Var gather_elements(Tape& tape, const Var& a, std::span<const std::size_t> flat_index);
// out[r, :] = x[r, :] * s[r]
Var scale_rows(Tape& tape, const Var& x, const Var& s);

Var layer_norm(Tape& tape, const Var& x, const Var& gain, const Var& bias,
               double eps = 1e-5);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.99;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t features = 0, double momentum = 0.99,
                          double eps = 1e-5);
};

// Feature-wise over the trailing axis. Train mode uses batch statistics and
// updates the running averages; infer mode uses the running averages only.
Var batch_norm(Tape& tape, const Var& x, const Var& scale, const Var& shift,
               BatchNormState& state, Mode mode);

// Mean next-token cross-entropy of logits [rows x vocab] against targets.
Var cross_entropy(Tape& tape, const Var& logits, std::span<const std::uint32_t> targets);

// Multi-head causal self-attention over packed projections.
// qkv: [batch*time x 3*d_model] laid out as [q | k | v]; returns [batch*time x d_model].
Var causal_attention(Tape& tape, const Var& qkv, std::size_t batch, std::size_t time,
                     std::size_t heads);

}  // namespace peer
