// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "peer/layers/feedforward.hpp"
#include "peer/layers/router.hpp"

namespace peer {

struct DenseConfig {
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  Activation activation = Activation::kGelu;
};

/// act(x W_in) W_out, no biases.
class DenseFFW final : public FeedForward {
 public:
  DenseFFW(const DenseConfig& config, std::uint64_t seed, std::string prefix = "dense");

  std::string_view kind() const override { return "dense"; }
  std::size_t d_model() const override { return config_.d_model; }
  Var forward(Tape& tape, const Var& x, Mode mode, const LayerContext& ctx = {}) override;
  std::vector<ParamRef> parameters() override;

  const DenseConfig& config() const { return config_; }
  Var& w_in() { return w_in_; }
  Var& w_out() { return w_out_; }

 private:
  DenseConfig config_;
  std::string prefix_;
  Var w_in_;   // [d_model x d_ff]
  Var w_out_;  // [d_ff x d_model]
};

struct PkmConfig {
  std::uint64_t n_memories = 4096;
  std::size_t heads = 4;
  std::size_t topk = 4;
  std::size_t d_model = 64;
  std::size_t query_dim = 128;
  ScoreNorm score_norm = ScoreNorm::kSoftmaxPerHead;
  bool query_bn = true;
  double bn_momentum = 0.99;
  double bn_eps = 1e-5;

  RouterConfig router() const;
};

/// Product-key memory: the same router as PEER, but each retrieved slot
/// contributes a constant value vector instead of a function of x.
class PkmLayer final : public FeedForward {
 public:
  PkmLayer(const PkmConfig& config, std::uint64_t seed, std::string prefix = "pkm");

  std::string_view kind() const override { return "pkm"; }
  std::size_t d_model() const override { return config_.d_model; }
  Var forward(Tape& tape, const Var& x, Mode mode, const LayerContext& ctx = {}) override;
  std::vector<ParamRef> parameters() override;
  std::vector<BufferRef> buffers() override;

  // y = sum over slots of weights * values[id], for already-routed tokens.
  Var readout(Tape& tape, const Var& weights, const RetrievalBatch& routes, std::size_t tokens,
              OpCounter* counter = nullptr);

  const PkmConfig& config() const { return config_; }
  ProductKeyRouter& router() { return router_; }
  Var& values() { return values_; }

 private:
  PkmConfig config_;
  std::string prefix_;
  ProductKeyRouter router_;
  Var values_;  // [N x d_model]
};

struct MoeConfig {
  std::size_t n_experts = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  Activation activation = Activation::kGelu;
  // Average experts per token; capacity c = ceil(M * G / E) for M tokens.
  double granularity = 1.0;
  // Fixed capacity per expert; 0 derives it from the granularity.
  std::size_t capacity = 0;
};

/// Expert-choice MoE: every expert takes its top-c tokens by softmax gate
/// score, so no expert ever handles more than c tokens.
class ExpertChoiceMoE final : public FeedForward {
 public:
  ExpertChoiceMoE(const MoeConfig& config, std::uint64_t seed, std::string prefix = "moe");

  std::string_view kind() const override { return "moe"; }
  std::size_t d_model() const override { return config_.d_model; }
  Var forward(Tape& tape, const Var& x, Mode mode, const LayerContext& ctx = {}) override;
  std::vector<ParamRef> parameters() override;

  std::size_t capacity(std::size_t tokens) const;
  // Tokens chosen by each expert in the most recent forward pass.
  const std::vector<std::vector<std::size_t>>& last_assignment() const { return assignment_; }

  const MoeConfig& config() const { return config_; }
  Var& gate() { return gate_; }
  std::vector<std::unique_ptr<DenseFFW>>& experts() { return experts_; }

 private:
  MoeConfig config_;
  std::string prefix_;
  Var gate_;  // [d_model x E]
  std::vector<std::unique_ptr<DenseFFW>> experts_;
  std::vector<std::vector<std::size_t>> assignment_;
};

}  // namespace peer
