// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <string>

#include "peer/analysis/usage.hpp"
#include "peer/layers/feedforward.hpp"
#include "peer/layers/router.hpp"

namespace peer {

struct PeerConfig {
  std::uint64_t n_experts = 4096;
  std::size_t heads = 4;
  std::size_t topk = 4;
  std::size_t d_model = 64;
  std::size_t query_dim = 128;
  Activation activation = Activation::kGelu;
  ScoreNorm score_norm = ScoreNorm::kSoftmaxPerHead;
  bool query_bn = true;
  bool glu = false;
  double bn_momentum = 0.99;
  double bn_eps = 1e-5;

  void validate() const;
  // Active experts per token, G = h*k.
  std::size_t granularity() const { return heads * topk; }
  RouterConfig router() const;
};

/// Per-expert weight rows: expert i computes act(u_i . x) * v_i, or
/// act(u_i . x) * (w_i . x) * v_i with GLU gating.
struct ExpertStore {
  Var down;  // [N x d_model], rows u_i
  Var up;    // [N x d_model], rows v_i
  Var gate;  // [N x d_model] or empty
};

/// Weighted sum of singleton experts over the routed (token, head, slot)
/// triples: y[t] = sum_{h,j} g[t,h,j] * e_{id}(x[t]).
/// weights: [tokens*heads x k]. The adjoint reaches x, the weights and only
/// the retrieved rows of the expert tables.
Var expert_mix(Tape& tape, const Var& x, const Var& weights,
               std::shared_ptr<const RetrievalBatch> routes,
               std::size_t heads, const ExpertStore& experts, Activation act,
               OpCounter* counter = nullptr);

struct PeerGradients {
  Tensor x;
  std::vector<Tensor> query;  // per head
  Tensor bn_scale, bn_shift;  // empty without query BN
  Tensor subkeys_c, subkeys_cp;
  Tensor down, up, gate;      // gate empty without GLU
};

struct PeerOutput {
  Tensor y;
  Routing routing;
};

// Retrieved expert vectors stacked as columns: W = [u_1..u_h], V = [v_1..v_h].
struct DenseEquivalent {
  Tensor w;  // [d_model x heads]
  Tensor v;  // [d_model x heads]
};

class PeerLayer final : public FeedForward {
 public:
  PeerLayer(const PeerConfig& config, std::uint64_t seed, std::string prefix = "peer");

  std::string_view kind() const override { return "peer"; }
  std::size_t d_model() const override { return config_.d_model; }

  // x: [..., d_model]. Records onto `tape` like any other op.
  Var forward(Tape& tape, const Var& x, Mode mode, const LayerContext& ctx = {}) override;

  // Standalone pass. In train mode the pass is kept so backward() can follow.
  PeerOutput forward(const Tensor& x, Mode mode, OpCounter* counter = nullptr);
  // Gradients of sum(upstream * y) for the last train-mode forward().
  PeerGradients backward(const Tensor& upstream);

  // Only for k == 1 with per-head softmax and no GLU; x is one token.
  DenseEquivalent assemble_dense_equivalent(std::span<const double> x);

  std::vector<ParamRef> parameters() override;
  std::vector<BufferRef> buffers() override;

  const PeerConfig& config() const { return config_; }
  ProductKeyRouter& router() { return router_; }
  ExpertStore& experts() { return experts_; }

 private:
  struct Recorded {
    std::unique_ptr<Tape> tape;
    Var x;
    Var y;
  };

  PeerConfig config_;
  std::string prefix_;
  ProductKeyRouter router_;
  ExpertStore experts_;
  std::optional<Recorded> recorded_;
};

// acc.z_prime[id] += g for every routed (token, head, slot). Throws
// DimensionError for an expert id outside the accumulator.
UsageAccumulator& record_usage(const Routing& routing, UsageAccumulator& acc);

}  // namespace peer
