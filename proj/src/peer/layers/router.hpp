// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "peer/layers/feedforward.hpp"
#include "peer/retrieval/product_key_index.hpp"

namespace peer {

enum class ScoreNorm {
  kSoftmaxPerHead,  // softmax over the k scores of each head
  kSigmoid,         // elementwise
  kSoftmaxJoint,    // softmax over all h*k scores of a token
};

ScoreNorm parse_score_norm(std::string_view name);
std::string_view score_norm_name(ScoreNorm norm);

struct RouterConfig {
  std::uint64_t n_keys = 4096;
  std::size_t heads = 4;
  std::size_t topk = 4;
  std::size_t d_model = 64;
  std::size_t query_dim = 128;
  ScoreNorm score_norm = ScoreNorm::kSoftmaxPerHead;
  bool query_bn = true;
  double bn_momentum = 0.99;
  double bn_eps = 1e-5;

  // Throws ConfigError on a non-square key count, odd query_dim or k > sqrt(N).
  void validate() const;
};

/// Per-token retrieval results, laid out [token][head].
using RetrievalBatch = std::vector<RetrievalResult>;

/// Raw query/key scores [tokens*heads x k] for the selected keys. Top-k
/// selection is not differentiated; gradients reach the queries and the
/// selected sub-keys only.
Var retrieval_scores(Tape& tape, const Var& queries, ProductKeyIndex& index, std::size_t heads,
                     std::size_t k, std::shared_ptr<RetrievalBatch>& results,
                     OpCounter* counter);

/// h independent bias-free query networks, an optional BN over the
/// concatenated head queries, and one product-key index shared by every head.
/// Used by both PEER and PKM.
class ProductKeyRouter {
 public:
  ProductKeyRouter(const RouterConfig& config, std::uint64_t seed, std::string prefix);

  struct Output {
    Var queries;  // [tokens x heads*query_dim], after BN when enabled
    Var scores;   // raw, [tokens*heads x k]
    Var weights;  // normalized, [tokens*heads x k]
    std::shared_ptr<RetrievalBatch> results;
  };

  // x: [tokens x d_model]
  Output route(Tape& tape, const Var& x, Mode mode, OpCounter* counter);

  const RouterConfig& config() const { return config_; }
  ProductKeyIndex& index() { return index_; }
  const ProductKeyIndex& index() const { return index_; }
  std::vector<Var>& query_nets() { return query_nets_; }
  std::optional<BatchNormState>& bn_state() { return bn_state_; }
  const Var& bn_scale() const { return bn_scale_; }
  const Var& bn_shift() const { return bn_shift_; }

  std::vector<ParamRef> parameters();
  std::vector<BufferRef> buffers();
  std::uint64_t parameter_count() const;

 private:
  RouterConfig config_;
  std::string prefix_;
  ProductKeyIndex index_;
  std::vector<Var> query_nets_;  // heads x [d_model x query_dim]
  Var bn_scale_;
  Var bn_shift_;
  std::optional<BatchNormState> bn_state_;
};

// Copies per-token selections and weights into a Routing echo.
void fill_routing(const ProductKeyRouter::Output& out, std::size_t tokens, std::size_t heads,
                  std::size_t k, Routing& routing);

}  // namespace peer
