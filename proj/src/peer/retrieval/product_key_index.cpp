// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/retrieval/product_key_index.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "peer/core/error.hpp"
#include "peer/core/ops.hpp"
#include "peer/core/random.hpp"

namespace peer {

std::uint64_t isqrt(std::uint64_t n) {
  auto s = static_cast<std::uint64_t>(std::sqrt(static_cast<double>(n)));
  while (s * s > n) --s;
  while ((s + 1) * (s + 1) <= n) ++s;
  return s;
}

ProductKeyIndex ProductKeyIndex::build(std::uint64_t n_experts, std::size_t key_dim,
                                       double init_scale, std::uint64_t seed) {
  const std::uint64_t side = isqrt(n_experts);
  if (n_experts == 0 || side * side != n_experts) {
    throw ConfigError("product-key index needs a perfect-square expert count, got " +
                      std::to_string(n_experts));
  }
  if (key_dim == 0 || key_dim % 2 != 0) {
    throw ConfigError("product-key index needs an even key dimension, got " +
                      std::to_string(key_dim));
  }
  const std::size_t half = key_dim / 2;
  const double bound = init_scale > 0.0 ? init_scale : 1.0 / std::sqrt(static_cast<double>(half));
  Rng rng_c(derive_seed(seed, "subkeys.c"));
  Rng rng_cp(derive_seed(seed, "subkeys.cp"));
  return ProductKeyIndex(uniform({side, half}, -bound, bound, rng_c),
                         uniform({side, half}, -bound, bound, rng_cp));
}

ProductKeyIndex::ProductKeyIndex(Tensor c, Tensor c_prime) {
  if (c.rank() != 2 || c.shape() != c_prime.shape() || c.dim(0) == 0 || c.dim(1) == 0) {
    throw ConfigError("sub-key tables must be equal non-empty matrices, got " +
                      shape_str(c.shape()) + " and " + shape_str(c_prime.shape()));
  }
  side_ = c.dim(0);
  half_ = c.dim(1);
  c_ = {Var::parameter(std::move(c)), KeySide::kC};
  cp_ = {Var::parameter(std::move(c_prime)), KeySide::kCPrime};
}

void ProductKeyIndex::check_query(std::span<const double> query) const {
  if (query.size() != key_dim()) {
    throw DimensionError("query of length " + std::to_string(query.size()) +
                         " for key dimension " + std::to_string(key_dim()));
  }
  for (double v : query) {
    if (!std::isfinite(v)) throw NumericError("non-finite retrieval query");
  }
}

RetrievalResult ProductKeyIndex::retrieve_topk(std::span<const double> query, std::size_t k,
                                               OpCounter* counter) const {
  check_query(query);
  if (k < 1 || k > side_) {
    throw ConfigError("product-key top-k needs 1 <= k <= sqrt(N)=" + std::to_string(side_) +
                      ", got k=" + std::to_string(k));
  }
  const auto q1 = query.first(half_);
  const auto q2 = query.last(half_);
  const Tensor& kc = c_.keys.value();
  const Tensor& kcp = cp_.keys.value();

  std::vector<double> s1(side_), s2(side_);
  for (std::size_t i = 0; i < side_; ++i) {
    s1[i] = dot(q1, kc.row(i));
    s2[i] = dot(q2, kcp.row(i));
  }
  OpCounter local;
  local.macs += side_ * key_dim();
  const auto top1 = topk(s1, k, &local);
  const auto top2 = topk(s2, k, &local);

  struct Candidate {
    double score;
    std::uint64_t id;
    std::uint32_t i, j;
  };
  std::vector<Candidate> cand;
  cand.reserve(k * k);
  for (auto i : top1) {
    for (auto j : top2) {
      cand.push_back({s1[i] + s2[j], static_cast<std::uint64_t>(i) * side_ + j,
                      static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
    }
  }
  local.macs += k * k;
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                    [&](const Candidate& a, const Candidate& b) {
                      ++local.comparisons;
                      if (a.score != b.score) return a.score > b.score;
                      return a.id < b.id;
                    });

  RetrievalResult out;
  out.indices.reserve(k);
  for (std::size_t m = 0; m < k; ++m) {
    out.indices.push_back(cand[m].id);
    out.scores.push_back(cand[m].score);
    out.row_c.push_back(cand[m].i);
    out.row_cp.push_back(cand[m].j);
  }
  if (counter) *counter += local;
  return out;
}

RetrievalResult ProductKeyIndex::retrieve_exhaustive(std::span<const double> query,
                                                     std::size_t k, OpCounter* counter) const {
  check_query(query);
  const std::uint64_t n = n_experts();
  if (k < 1 || k > n) {
    throw ConfigError("exhaustive top-k needs 1 <= k <= N=" + std::to_string(n) + ", got k=" +
                      std::to_string(k));
  }
  const Tensor& kc = c_.keys.value();
  const Tensor& kcp = cp_.keys.value();
  std::vector<double> scores(n);
  std::vector<double> key(key_dim());
  const auto full = std::span<const double>(key);
  for (std::size_t i = 0; i < side_; ++i) {
    std::copy(kc.row(i).begin(), kc.row(i).end(), key.begin());
    for (std::size_t j = 0; j < side_; ++j) {
      std::copy(kcp.row(j).begin(), kcp.row(j).end(),
                key.begin() + static_cast<std::ptrdiff_t>(half_));
      // Accumulated per half so that both search routes round identically.
      scores[i * side_ + j] =
          dot(query.first(half_), full.first(half_)) + dot(query.last(half_), full.last(half_));
    }
  }
  OpCounter local;
  local.macs += n * key_dim();
  const auto top = topk(scores, k, &local);
  RetrievalResult out;
  for (auto e : top) {
    out.indices.push_back(e);
    out.scores.push_back(scores[e]);
    out.row_c.push_back(static_cast<std::uint32_t>(e / side_));
    out.row_cp.push_back(static_cast<std::uint32_t>(e % side_));
  }
  if (counter) *counter += local;
  return out;
}

ProductKeyIndex::Gradients ProductKeyIndex::retrieval_backward(
    std::span<const double> query, const RetrievalResult& result,
    std::span<const double> score_grads) const {
  Gradients g{std::vector<double>(key_dim(), 0.0), Tensor::zeros_like(c_.keys.value()),
              Tensor::zeros_like(cp_.keys.value())};
  accumulate_backward(query, result, score_grads, g.query, &g.c, &g.c_prime);
  return g;
}

void ProductKeyIndex::accumulate_backward(std::span<const double> query,
                                          const RetrievalResult& result,
                                          std::span<const double> score_grads,
                                          std::span<double> grad_query, Tensor* grad_c,
                                          Tensor* grad_c_prime) const {
  check_query(query);
  const std::size_t m = result.size();
  if (score_grads.size() != m || result.scores.size() != m || result.row_c.size() != m ||
      result.row_cp.size() != m || grad_query.size() != key_dim()) {
    throw DimensionError("retrieval_backward: result, gradient and query sizes disagree");
  }
  for (std::size_t r = 0; r < m; ++r) {
    if (result.row_c[r] >= side_ || result.row_cp[r] >= side_ ||
        result.indices[r] !=
            static_cast<std::uint64_t>(result.row_c[r]) * side_ + result.row_cp[r]) {
      throw StateError("retrieval_backward: result does not belong to this index");
    }
  }
  const Tensor& kc = c_.keys.value();
  const Tensor& kcp = cp_.keys.value();
  for (std::size_t r = 0; r < m; ++r) {
    const double g = score_grads[r];
    if (g == 0.0) continue;
    const auto i = result.row_c[r];
    const auto j = result.row_cp[r];
    for (std::size_t t = 0; t < half_; ++t) {
      grad_query[t] += g * kc.at(i, t);
      grad_query[half_ + t] += g * kcp.at(j, t);
      if (grad_c) grad_c->at(i, t) += g * query[t];
      if (grad_c_prime) grad_c_prime->at(j, t) += g * query[half_ + t];
    }
  }
}

}  // namespace peer
