// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/analysis/accounting.hpp"

#include <cmath>

#include "peer/core/error.hpp"
#include "peer/retrieval/product_key_index.hpp"

namespace peer {

namespace {

std::uint64_t router_params(const RouterConfig& r) {
  std::uint64_t n = r.heads * r.d_model * r.query_dim;  // query nets
  n += 2 * isqrt(r.n_keys) * (r.query_dim / 2);         // both sub-key sets
  if (r.query_bn) n += 2 * r.heads * r.query_dim;
  return n;
}

std::uint64_t router_buffers(const RouterConfig& r) {
  return r.query_bn ? 2 * r.heads * r.query_dim : 0;
}

std::uint64_t retrieval_macs(const RouterConfig& r) {
  const std::uint64_t d = r.query_dim;
  return r.heads * (r.d_model * d + isqrt(r.n_keys) * d + r.topk * r.topk);
}

}  // namespace

CostModel param_counts(const DenseConfig& c, bool bias) {
  CostModel m;
  m.expert = (2 * c.d_model + (bias ? 1 : 0)) * c.d_ff;
  m.total = m.active = m.expert;
  m.mac_per_token = mac_per_token(c);
  return m;
}

CostModel param_counts(const PeerConfig& c, bool bias) {
  c.validate();
  const std::uint64_t per_dim = (c.glu ? 3 : 2) * c.d_model + (bias ? 1 : 0);
  CostModel m;
  m.expert = per_dim;  // d_expert = 1
  m.granularity = static_cast<double>(c.granularity());
  m.active = c.granularity() * m.expert;
  m.router = router_params(c.router());
  m.buffers = router_buffers(c.router());
  m.total = c.n_experts * m.expert + m.router;
  m.mac_per_token = mac_per_token(c);
  return m;
}

CostModel param_counts(const PkmConfig& c, bool /*bias*/) {
  c.router().validate();
  CostModel m;
  m.expert = c.d_model;  // one value row
  m.granularity = static_cast<double>(c.heads * c.topk);
  m.active = c.heads * c.topk * m.expert;
  m.router = router_params(c.router());
  m.buffers = router_buffers(c.router());
  m.total = c.n_memories * m.expert + m.router;
  m.mac_per_token = mac_per_token(c);
  return m;
}

CostModel param_counts(const MoeConfig& c, bool bias) {
  CostModel m;
  m.expert = (2 * c.d_model + (bias ? 1 : 0)) * c.d_ff;
  m.granularity = c.granularity;
  m.active = static_cast<std::uint64_t>(std::llround(c.granularity * static_cast<double>(m.expert)));
  m.router = c.d_model * c.n_experts;
  m.total = c.n_experts * m.expert + m.router;
  m.mac_per_token = mac_per_token(c);
  return m;
}

std::uint64_t mac_per_token(const DenseConfig& c) { return 2 * c.d_model * c.d_ff; }

std::uint64_t mac_per_token(const PeerConfig& c) {
  return retrieval_macs(c.router()) + (c.glu ? 3 : 2) * c.d_model * c.granularity();
}

std::uint64_t mac_per_token(const PkmConfig& c) {
  return retrieval_macs(c.router()) + c.d_model * c.topk * c.heads;
}

std::uint64_t mac_per_token(const MoeConfig& c) {
  const double experts = c.granularity * 2.0 * static_cast<double>(c.d_model * c.d_ff);
  return c.d_model * c.n_experts + static_cast<std::uint64_t>(std::llround(experts));
}

std::uint64_t moe_macs(const MoeConfig& c, std::size_t tokens) {
  std::size_t cap = c.capacity;
  if (cap == 0) {
    cap = static_cast<std::size_t>(
        std::ceil(static_cast<double>(tokens) * c.granularity / static_cast<double>(c.n_experts)));
  }
  cap = std::min(cap, tokens);
  return tokens * c.d_model * c.n_experts + c.n_experts * cap * 2 * c.d_model * c.d_ff;
}

CostModel middle_layer_cost(const ModelConfig& c, bool bias) {
  ModelConfig s = c;
  s.sync();
  switch (s.middle) {
    case MiddleKind::kDense:
      return param_counts(DenseConfig{s.d_model, s.d_ff, s.activation}, bias);
    case MiddleKind::kPeer:
      return param_counts(s.peer, bias);
    case MiddleKind::kPkm:
      return param_counts(s.pkm, bias);
    case MiddleKind::kMoe:
      return param_counts(s.moe, bias);
  }
  throw ConfigError("unhandled middle layer kind");
}

ModelCost model_cost(const ModelConfig& c, bool bias) {
  const std::uint64_t d = c.d_model;
  const CostModel dense = param_counts(DenseConfig{c.d_model, c.d_ff, c.activation}, bias);
  const CostModel mid = middle_layer_cost(c, bias);
  ModelCost m;
  m.total = c.vocab * d + c.seq_len * d;                    // embeddings
  m.total += c.n_blocks * (4 * d + 3 * d * d + d * d);      // norms and attention
  m.total += (c.n_blocks - 1) * dense.total + mid.total;
  m.total += 2 * d + d * c.vocab;                           // final norm and head
  m.active = m.total - mid.total + mid.router + mid.active;
  m.buffers = mid.buffers;
  m.mac_per_token = c.n_blocks * (4 * d * d + 2 * c.seq_len * d);
  m.mac_per_token += (c.n_blocks - 1) * dense.mac_per_token + mid.mac_per_token;
  m.mac_per_token += d * c.vocab;
  return m;
}

std::uint64_t mac_per_step(const ModelConfig& model, std::size_t batch) {
  return 3 * model_cost(model, false).mac_per_token * batch * model.seq_len;
}

double evaluate_scaling_law(const ScalingLawParams& p, double P, double D, double G) {
  if (!(p.alpha > 0.0 && p.beta > 0.0 && p.gamma > 0.0)) {
    throw ConfigError("scaling-law exponents alpha, beta, gamma must be positive");
  }
  if (!(P > 0.0 && D > 0.0 && G > 0.0)) {
    throw ConfigError("scaling law needs positive P, D and G");
  }
  return p.c + (p.g / std::pow(G, p.gamma) + p.a) / std::pow(P, p.alpha) + p.b / std::pow(D, p.beta);
}

}  // namespace peer
