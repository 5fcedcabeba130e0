// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/layers/baselines.hpp"

#include <cmath>

#include "peer/core/error.hpp"
#include "peer/core/random.hpp"

namespace peer {

namespace {

void require_width(const Var& x, std::size_t d_model, std::string_view layer) {
  if (x.value().rank() == 0 || x.value().cols() != d_model) {
    throw DimensionError(std::string(layer) + " input " + shape_str(x.shape()) +
                         " for d_model " + std::to_string(d_model));
  }
}

Var flatten_tokens(Tape& tape, const Var& x) {
  const Tensor& v = x.value();
  return v.rank() == 2 ? x : reshape(tape, x, {v.rows(), v.cols()});
}

Var restore_shape(Tape& tape, const Var& y, const Var& x) {
  return x.value().rank() == 2 ? y : reshape(tape, y, x.shape());
}

}  // namespace

DenseFFW::DenseFFW(const DenseConfig& config, std::uint64_t seed, std::string prefix)
    : config_(config), prefix_(std::move(prefix)) {
  if (config_.d_model == 0 || config_.d_ff == 0) throw ConfigError("dense FFW needs d_model, d_ff > 0");
  Rng rng_in(derive_seed(seed, prefix_ + ".w_in"));
  Rng rng_out(derive_seed(seed, prefix_ + ".w_out"));
  w_in_ = Var::parameter(
      normal({config_.d_model, config_.d_ff}, 1.0 / std::sqrt(double(config_.d_model)), rng_in));
  w_out_ = Var::parameter(
      normal({config_.d_ff, config_.d_model}, 1.0 / std::sqrt(double(config_.d_ff)), rng_out));
}

Var DenseFFW::forward(Tape& tape, const Var& x, Mode, const LayerContext& ctx) {
  require_width(x, config_.d_model, "dense FFW");
  Var hidden = activation(tape, matmul(tape, x, w_in_), config_.activation);
  if (ctx.counter) ctx.counter->macs += x.value().rows() * 2 * config_.d_model * config_.d_ff;
  return matmul(tape, hidden, w_out_);
}

std::vector<ParamRef> DenseFFW::parameters() {
  return {{prefix_ + ".w_in", w_in_}, {prefix_ + ".w_out", w_out_}};
}

RouterConfig PkmConfig::router() const {
  RouterConfig r;
  r.n_keys = n_memories;
  r.heads = heads;
  r.topk = topk;
  r.d_model = d_model;
  r.query_dim = query_dim;
  r.score_norm = score_norm;
  r.query_bn = query_bn;
  r.bn_momentum = bn_momentum;
  r.bn_eps = bn_eps;
  return r;
}

PkmLayer::PkmLayer(const PkmConfig& config, std::uint64_t seed, std::string prefix)
    : config_(config), prefix_(std::move(prefix)), router_(config.router(), seed, prefix_) {
  Rng rng(derive_seed(seed, prefix_ + ".values"));
  const double std_v = 1.0 / std::sqrt(static_cast<double>(config_.heads * config_.topk));
  values_ = Var::parameter(normal({config_.n_memories, config_.d_model}, std_v, rng));
}

Var PkmLayer::readout(Tape& tape, const Var& weights, const RetrievalBatch& routes,
                      std::size_t tokens, OpCounter* counter) {
  const std::size_t heads = config_.heads, k = config_.topk;
  if (routes.size() != tokens * heads || weights.value().numel() != tokens * heads * k) {
    throw DimensionError("pkm readout: routing does not cover " + std::to_string(tokens) +
                         " tokens");
  }
  std::vector<std::size_t> ids, owner;
  ids.reserve(tokens * heads * k);
  owner.reserve(tokens * heads * k);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (auto e : routes[t * heads + h].indices) {
        ids.push_back(static_cast<std::size_t>(e));
        owner.push_back(t);
      }
    }
  }
  Var picked = gather_rows(tape, values_, ids);
  Var flat_w = reshape(tape, weights, {ids.size()});
  Var weighted = scale_rows(tape, picked, flat_w);
  if (counter) counter->macs += tokens * heads * k * config_.d_model;
  return scatter_add_rows(tape, weighted, owner, tokens);
}

Var PkmLayer::forward(Tape& tape, const Var& x, Mode mode, const LayerContext& ctx) {
  require_width(x, config_.d_model, "pkm");
  Var flat = flatten_tokens(tape, x);
  const std::size_t tokens = flat.value().rows();
  auto routed = router_.route(tape, flat, mode, ctx.counter);
  Var y = readout(tape, routed.weights, *routed.results, tokens, ctx.counter);
  if (ctx.routing) fill_routing(routed, tokens, config_.heads, config_.topk, *ctx.routing);
  return restore_shape(tape, y, x);
}

std::vector<ParamRef> PkmLayer::parameters() {
  auto out = router_.parameters();
  out.push_back({prefix_ + ".values", values_});
  return out;
}

std::vector<BufferRef> PkmLayer::buffers() { return router_.buffers(); }

ExpertChoiceMoE::ExpertChoiceMoE(const MoeConfig& config, std::uint64_t seed, std::string prefix)
    : config_(config), prefix_(std::move(prefix)) {
  if (config_.n_experts < 1) throw ConfigError("expert-choice MoE needs at least one expert");
  if (config_.capacity == 0 && !(config_.granularity > 0.0)) {
    throw ConfigError("expert-choice capacity must be at least 1");
  }
  Rng rng(derive_seed(seed, prefix_ + ".gate"));
  gate_ = Var::parameter(normal({config_.d_model, config_.n_experts},
                                1.0 / std::sqrt(double(config_.d_model)), rng));
  for (std::size_t e = 0; e < config_.n_experts; ++e) {
    experts_.push_back(std::make_unique<DenseFFW>(
        DenseConfig{config_.d_model, config_.d_ff, config_.activation}, seed,
        prefix_ + ".expert." + std::to_string(e)));
  }
}

std::size_t ExpertChoiceMoE::capacity(std::size_t tokens) const {
  std::size_t c = config_.capacity;
  if (c == 0) {
    c = static_cast<std::size_t>(std::ceil(static_cast<double>(tokens) * config_.granularity /
                                           static_cast<double>(config_.n_experts)));
  }
  if (c < 1) throw ConfigError("expert-choice capacity must be at least 1");
  return std::min(c, tokens);
}

Var ExpertChoiceMoE::forward(Tape& tape, const Var& x, Mode, const LayerContext& ctx) {
  require_width(x, config_.d_model, "expert-choice MoE");
  Var flat = flatten_tokens(tape, x);
  const std::size_t tokens = flat.value().rows();
  if (tokens < 1) throw DimensionError("expert-choice MoE needs at least one token");
  const std::size_t n_exp = config_.n_experts;
  const std::size_t c = capacity(tokens);

  Var probs = softmax(tape, matmul(tape, flat, gate_));  // [M x E]
  if (ctx.counter) ctx.counter->macs += tokens * config_.d_model * n_exp;

  assignment_.assign(n_exp, {});
  Var y;
  std::vector<double> column(tokens);
  for (std::size_t e = 0; e < n_exp; ++e) {
    for (std::size_t t = 0; t < tokens; ++t) column[t] = probs.value().at(t, e);
    auto chosen = topk(column, c);
    std::vector<std::size_t> flat_idx(chosen.size());
    for (std::size_t r = 0; r < chosen.size(); ++r) flat_idx[r] = chosen[r] * n_exp + e;
    Var xe = gather_rows(tape, flat, chosen);
    Var oe = experts_[e]->forward(tape, xe, Mode::kTrain, {ctx.counter, nullptr});
    Var weighted = scale_rows(tape, oe, gather_elements(tape, probs, flat_idx));
    Var contrib = scatter_add_rows(tape, weighted, chosen, tokens);
    y = y ? add(tape, y, contrib) : contrib;
    assignment_[e] = std::move(chosen);
  }
  return restore_shape(tape, y, x);
}

std::vector<ParamRef> ExpertChoiceMoE::parameters() {
  std::vector<ParamRef> out{{prefix_ + ".gate", gate_}};
  for (auto& e : experts_) {
    for (auto& p : e->parameters()) out.push_back(std::move(p));
  }
  return out;
}

}  // namespace peer
