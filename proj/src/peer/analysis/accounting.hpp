// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "peer/layers/baselines.hpp"
#include "peer/layers/peer_layer.hpp"
#include "peer/lm/config.hpp"

namespace peer {

/// Parameter bookkeeping of one feedforward layer. With bias accounting every
/// single-hidden-layer expert is charged (2*d_model + 1) * d_expert; without
/// it, (2*d_model) * d_expert, which is what the tensors actually hold.
struct CostModel {
  std::uint64_t total = 0;         // P: experts + router
  std::uint64_t active = 0;        // P_active, experts only
  std::uint64_t expert = 0;        // P_expert, one expert
  double granularity = 1.0;        // G = P_active / P_expert
  std::uint64_t router = 0;        // query nets, sub-keys, BN affine, gates
  std::uint64_t buffers = 0;       // non-trainable state (BN running stats)
  std::uint64_t mac_per_token = 0;
};

CostModel param_counts(const DenseConfig& c, bool bias = true);
CostModel param_counts(const PeerConfig& c, bool bias = true);
CostModel param_counts(const PkmConfig& c, bool bias = true);
CostModel param_counts(const MoeConfig& c, bool bias = true);

// Per token, integer MACs. PEER: h*(d_model*d + sqrt(N)*d + k^2) + 2*d_model*h*k
// (+ d_model*h*k with GLU). Dense: 2*d_model*d_ff. PKM: retrieval as PEER
// plus the d_model*k*h readout. MoE: gate d_model*E plus G expert passes.
std::uint64_t mac_per_token(const DenseConfig& c);
std::uint64_t mac_per_token(const PeerConfig& c);
std::uint64_t mac_per_token(const PkmConfig& c);
std::uint64_t mac_per_token(const MoeConfig& c);
// Exact expert-choice cost of one forward pass over `tokens` tokens; capacity
// rounding makes it differ from tokens * mac_per_token unless M*G/E is integral.
std::uint64_t moe_macs(const MoeConfig& c, std::size_t tokens);

CostModel middle_layer_cost(const ModelConfig& c, bool bias = true);

struct ModelCost {
  std::uint64_t total = 0;   // all trainable parameters
  std::uint64_t active = 0;  // total minus the middle layer's inactive experts
  std::uint64_t buffers = 0;
  // Forward MACs per token: projections, attention scores and mixing
  // (2 * seq_len * d_model per block), every FFW and the output head.
  std::uint64_t mac_per_token = 0;
};

ModelCost model_cost(const ModelConfig& c, bool bias = true);

// Forward + backward, counted as three forward passes over batch*seq_len tokens.
std::uint64_t mac_per_step(const ModelConfig& model, std::size_t batch);

/// Constants of L(P, D, G) = c + (g / G^gamma + a) / P^alpha + b / D^beta.
struct ScalingLawParams {
  double a = 0.0;
  double b = 0.0;
  double g = 0.0;
  double gamma = 1.0;
  double alpha = 1.0;
  double beta = 1.0;
  double c = 0.0;
};

// Throws ConfigError for non-positive exponents or non-positive P, D, G.
double evaluate_scaling_law(const ScalingLawParams& p, double P, double D, double G);

}  // namespace peer
