// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/layers/router.hpp"

#include <cmath>
#include <string>

#include "peer/core/error.hpp"
#include "peer/core/random.hpp"

namespace peer {

ScoreNorm parse_score_norm(std::string_view name) {
  if (name == "softmax" || name == "softmax_per_head") return ScoreNorm::kSoftmaxPerHead;
  if (name == "sigmoid") return ScoreNorm::kSigmoid;
  if (name == "softmax_joint") return ScoreNorm::kSoftmaxJoint;
  throw ConfigError("unknown score normalization '" + std::string(name) +
                    "' (expected softmax_per_head|sigmoid|softmax_joint)");
}

std::string_view score_norm_name(ScoreNorm norm) {
  switch (norm) {
    case ScoreNorm::kSoftmaxPerHead: return "softmax_per_head";
    case ScoreNorm::kSigmoid: return "sigmoid";
    case ScoreNorm::kSoftmaxJoint: return "softmax_joint";
  }
  return "softmax_per_head";
}

void RouterConfig::validate() const {
  const std::uint64_t side = isqrt(n_keys);
  if (n_keys == 0 || side * side != n_keys) {
    throw ConfigError("expert count must be a perfect square, got " + std::to_string(n_keys));
  }
  if (query_dim == 0 || query_dim % 2 != 0) {
    throw ConfigError("query dimension must be even, got " + std::to_string(query_dim));
  }
  if (heads < 1) throw ConfigError("need at least one retrieval head");
  if (topk < 1 || topk > side) {
    throw ConfigError("top-k must satisfy 1 <= k <= sqrt(N)=" + std::to_string(side) +
                      ", got " + std::to_string(topk));
  }
  if (d_model == 0) throw ConfigError("d_model must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0) || !(bn_eps > 0.0)) {
    throw ConfigError("batch-norm momentum must be in [0,1) and eps positive");
  }
}

Var retrieval_scores(Tape& tape, const Var& queries, ProductKeyIndex& index, std::size_t heads,
                     std::size_t k, std::shared_ptr<RetrievalBatch>& results,
                     OpCounter* counter) {
  const Tensor& q = queries.value();
  const std::size_t d = index.key_dim();
  if (q.cols() != heads * d) {
    throw DimensionError("retrieval_scores: queries " + shape_str(q.shape()) + " for " +
                         std::to_string(heads) + " heads of width " + std::to_string(d));
  }
  const std::size_t tokens = q.rows();
  results = std::make_shared<RetrievalBatch>();
  results->reserve(tokens * heads);
  Tensor out({tokens * heads, k});
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      auto res = index.retrieve_topk(q.row(t).subspan(h * d, d), k, counter);
      std::copy(res.scores.begin(), res.scores.end(), out.row(t * heads + h).begin());
      results->push_back(std::move(res));
    }
  }
  Var c = index.c().keys;
  Var cp = index.c_prime().keys;
  const bool track = tape.needs_grad({&queries, &c, &cp});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([queries, c, cp, y, &index, results, heads, d, tokens]() mutable {
      if (!y.has_grad()) return;
      const Tensor& g = y.grad();
      std::vector<double> scratch(d);
      Tensor* gc = c.requires_grad() ? &c.grad() : nullptr;
      Tensor* gcp = cp.requires_grad() ? &cp.grad() : nullptr;
      for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
          std::fill(scratch.begin(), scratch.end(), 0.0);
          const auto& res = (*results)[t * heads + h];
          index.accumulate_backward(queries.value().row(t).subspan(h * d, d), res,
                                    g.row(t * heads + h), scratch, gc, gcp);
          if (queries.requires_grad()) {
            std::span<double> gq = queries.grad().row(t).subspan(h * d, d);
            for (std::size_t i = 0; i < d; ++i) gq[i] += scratch[i];
          }
        }
      }
    });
  }
  return y;
}

ProductKeyRouter::ProductKeyRouter(const RouterConfig& config, std::uint64_t seed,
                                   std::string prefix)
    : config_(config),
      prefix_(std::move(prefix)),
      index_((config.validate(),
              ProductKeyIndex::build(config.n_keys, config.query_dim, 0.0,
                                     derive_seed(seed, prefix_ + ".subkeys")))) {
  const double std_q = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
  for (std::size_t h = 0; h < config_.heads; ++h) {
    Rng rng(derive_seed(seed, prefix_ + ".query." + std::to_string(h) + ".w"));
    query_nets_.push_back(
        Var::parameter(normal({config_.d_model, config_.query_dim}, std_q, rng)));
  }
  if (config_.query_bn) {
    const std::size_t features = config_.heads * config_.query_dim;
    bn_scale_ = Var::parameter(Tensor({features}, 1.0));
    bn_shift_ = Var::parameter(Tensor({features}, 0.0));
    bn_state_.emplace(features, config_.bn_momentum, config_.bn_eps);
  }
}

ProductKeyRouter::Output ProductKeyRouter::route(Tape& tape, const Var& x, Mode mode,
                                                 OpCounter* counter) {
  const std::size_t tokens = x.value().rows();
  if (x.value().cols() != config_.d_model) {
    throw DimensionError("router input " + shape_str(x.shape()) + " for d_model " +
                         std::to_string(config_.d_model));
  }
  Output out;
  std::vector<Var> per_head;
  per_head.reserve(config_.heads);
  for (const Var& w : query_nets_) per_head.push_back(matmul(tape, x, w));
  out.queries = config_.heads == 1 ? per_head[0] : concat_cols(tape, per_head);
  if (bn_state_) {
    out.queries = batch_norm(tape, out.queries, bn_scale_, bn_shift_, *bn_state_, mode);
  }
  if (counter) counter->macs += tokens * config_.heads * config_.d_model * config_.query_dim;
  out.scores = retrieval_scores(tape, out.queries, index_, config_.heads, config_.topk,
                                out.results, counter);
  switch (config_.score_norm) {
    case ScoreNorm::kSoftmaxPerHead:
      out.weights = softmax(tape, out.scores);
      break;
    case ScoreNorm::kSigmoid:
      out.weights = sigmoid(tape, out.scores);
      break;
    case ScoreNorm::kSoftmaxJoint: {
      Var joint = reshape(tape, out.scores, {tokens, config_.heads * config_.topk});
      out.weights = reshape(tape, softmax(tape, joint), out.scores.shape());
      break;
    }
  }
  return out;
}

std::vector<ParamRef> ProductKeyRouter::parameters() {
  std::vector<ParamRef> out;
  out.push_back({prefix_ + ".subkeys.c", index_.c().keys});
  out.push_back({prefix_ + ".subkeys.cp", index_.c_prime().keys});
  for (std::size_t h = 0; h < query_nets_.size(); ++h) {
    out.push_back({prefix_ + ".query." + std::to_string(h) + ".w", query_nets_[h]});
  }
  if (bn_state_) {
    out.push_back({prefix_ + ".bn.scale", bn_scale_});
    out.push_back({prefix_ + ".bn.shift", bn_shift_});
  }
  return out;
}

std::vector<BufferRef> ProductKeyRouter::buffers() {
  if (!bn_state_) return {};
  return {{prefix_ + ".bn.mean", &bn_state_->running_mean},
          {prefix_ + ".bn.var", &bn_state_->running_var}};
}

std::uint64_t ProductKeyRouter::parameter_count() const {
  std::uint64_t n = 2 * index_.side() * index_.half_dim();
  n += config_.heads * config_.d_model * config_.query_dim;
  if (config_.query_bn) n += 2 * config_.heads * config_.query_dim;
  return n;
}

void fill_routing(const ProductKeyRouter::Output& out, std::size_t tokens, std::size_t heads,
                  std::size_t k, Routing& routing) {
  routing.tokens = tokens;
  routing.heads = heads;
  routing.k = k;
  routing.indices.clear();
  routing.indices.reserve(tokens * heads * k);
  for (const auto& res : *out.results) {
    routing.indices.insert(routing.indices.end(), res.indices.begin(), res.indices.end());
  }
  const auto w = out.weights.value().data();
  routing.weights.assign(w.begin(), w.end());
}

}  // namespace peer
