// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "peer/core/autograd.hpp"
#include "peer/core/op_counter.hpp"

namespace peer {

enum class KeySide { kC, kCPrime };

// One factor of the product-key set: sqrt(N) trainable sub-keys of width d/2.
struct SubKeySet {
  Var keys;  // [sqrt(N) x d/2]
  KeySide side = KeySide::kC;
};

/// Top-k answer for a single query. Scores are raw query/key inner products,
/// before any normalization.
struct RetrievalResult {
  std::vector<std::uint64_t> indices;
  std::vector<double> scores;
  // Sub-key rows that make up each returned expert id (id = row_c * sqrt(N) + row_cp).
  std::vector<std::uint32_t> row_c;
  std::vector<std::uint32_t> row_cp;

  std::size_t size() const { return indices.size(); }
};

/// Product-key index over N = sqrt(N)^2 implicit keys. The full key of expert
/// e = i*sqrt(N) + j is concat(c[i], c'[j]); it is never materialized on the
/// fast path. Exact top-k costs sqrt(N)*d multiply-accumulates to score the
/// sub-keys plus k^2 additions to score the candidate grid.
///
/// Ties are broken by the smaller id at every stage, which keeps the fast path
/// exactly equal to exhaustive search.
class ProductKeyIndex {
 public:
  // Sub-keys drawn uniformly from [-init_scale, init_scale]; a non-positive
  // init_scale selects 1/sqrt(d/2). Throws ConfigError unless N is a perfect
  // square and d is even.
  static ProductKeyIndex build(std::uint64_t n_experts, std::size_t key_dim, double init_scale,
                               std::uint64_t seed);

  // Wraps existing sub-key tables, both [sqrt(N) x d/2].
  ProductKeyIndex(Tensor c, Tensor c_prime);

  std::uint64_t n_experts() const { return static_cast<std::uint64_t>(side_) * side_; }
  std::size_t side() const { return side_; }
  std::size_t key_dim() const { return 2 * half_; }
  std::size_t half_dim() const { return half_; }

  SubKeySet& c() { return c_; }
  SubKeySet& c_prime() { return cp_; }
  const SubKeySet& c() const { return c_; }
  const SubKeySet& c_prime() const { return cp_; }

  // Requires 1 <= k <= sqrt(N).
  RetrievalResult retrieve_topk(std::span<const double> query, std::size_t k,
                                OpCounter* counter = nullptr) const;

  // Reference O(N*d) search over all materialized keys. Requires 1 <= k <= N.
  RetrievalResult retrieve_exhaustive(std::span<const double> query, std::size_t k,
                                      OpCounter* counter = nullptr) const;

  struct Gradients {
    std::vector<double> query;
    Tensor c;
    Tensor c_prime;
  };

  // d(score_m)/d(query, sub-keys) contracted with upstream score gradients.
  // Sub-keys that were not selected get exactly zero.
  Gradients retrieval_backward(std::span<const double> query, const RetrievalResult& result,
                               std::span<const double> score_grads) const;

  // Accumulating form of retrieval_backward; null sub-key targets are skipped.
  void accumulate_backward(std::span<const double> query, const RetrievalResult& result,
                           std::span<const double> score_grads, std::span<double> grad_query,
                           Tensor* grad_c, Tensor* grad_c_prime) const;

 private:
  ProductKeyIndex() = default;
  void check_query(std::span<const double> query) const;

  SubKeySet c_;
  SubKeySet cp_;
  std::size_t side_ = 0;
  std::size_t half_ = 0;
};

// Largest s with s*s <= n; n is a perfect square iff isqrt(n)^2 == n.
std::uint64_t isqrt(std::uint64_t n);

}  // namespace peer
