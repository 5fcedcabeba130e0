// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/layers/peer_layer.hpp"

#include <cmath>

#include "peer/core/error.hpp"
#include "peer/core/random.hpp"

namespace peer {

void PeerConfig::validate() const { router().validate(); }

RouterConfig PeerConfig::router() const {
  RouterConfig r;
  r.n_keys = n_experts;
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

Var expert_mix(Tape& tape, const Var& x, const Var& weights,
               std::shared_ptr<const RetrievalBatch> routes,
               std::size_t heads, const ExpertStore& experts, Activation act,
               OpCounter* counter) {
  const Tensor& xv = x.value();
  const std::size_t tokens = xv.rows();
  const std::size_t dm = xv.cols();
  const Tensor& g = weights.value();
  const std::size_t k = g.cols();
  const bool glu = static_cast<bool>(experts.gate);
  if (routes->size() != tokens * heads || g.rows() != tokens * heads ||
      experts.down.value().cols() != dm || experts.up.value().cols() != dm) {
    throw DimensionError("expert_mix: routing for " + std::to_string(routes->size()) +
                         " (token, head) pairs, weights " + shape_str(g.shape()) +
                         ", input " + shape_str(xv.shape()));
  }
  const std::uint64_t n_experts = experts.down.value().rows();

  // Pre-activations and gate values, one per (token, head, slot).
  std::vector<double> pre(tokens * heads * k);
  std::vector<double> gates(glu ? tokens * heads * k : 0);
  Tensor out(xv.shape());
  for (std::size_t t = 0; t < tokens; ++t) {
    auto xt = xv.row(t);
    auto yt = out.row(t);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto& res = (*routes)[t * heads + h];
      if (res.size() != k) throw DimensionError("expert_mix: route size differs from k");
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t slot = (t * heads + h) * k + j;
        const auto e = res.indices[j];
        if (e >= n_experts) throw DimensionError("expert_mix: expert id out of range");
        const double a = dot(xt, experts.down.value().row(e));
        double hidden = activate(act, a);
        pre[slot] = a;
        if (glu) {
          gates[slot] = dot(xt, experts.gate.value().row(e));
          hidden *= gates[slot];
        }
        const double coef = g.at(t * heads + h, j) * hidden;
        auto v = experts.up.value().row(e);
        for (std::size_t i = 0; i < dm; ++i) yt[i] += coef * v[i];
      }
    }
  }
  if (counter) counter->macs += tokens * heads * k * dm * (glu ? 3 : 2);

  Var down = experts.down, up = experts.up, gate = experts.gate;
  const bool track = tape.needs_grad({&x, &weights, &down, &up, &gate});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([x, weights, down, up, gate, y, routes, pre = std::move(pre),
                 gates = std::move(gates), tokens, heads, k, dm, glu, act]() mutable {
      if (!y.has_grad()) return;
      const Tensor& gy = y.grad();
      const Tensor& xv = x.value();
      const Tensor& g = weights.value();
      for (std::size_t t = 0; t < tokens; ++t) {
        auto xt = xv.row(t);
        auto gyt = gy.row(t);
        for (std::size_t h = 0; h < heads; ++h) {
          const auto& res = (*routes)[t * heads + h];
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t slot = (t * heads + h) * k + j;
            const auto e = res.indices[j];
            const double a = pre[slot];
            const double act_a = activate(act, a);
            const double hidden = glu ? act_a * gates[slot] : act_a;
            const double w = g.at(t * heads + h, j);
            const double dcoef = dot(up.value().row(e), gyt);
            if (up.requires_grad()) {
              auto gv = up.grad().row(e);
              const double coef = w * hidden;
              for (std::size_t i = 0; i < dm; ++i) gv[i] += coef * gyt[i];
            }
            if (weights.requires_grad()) weights.grad().at(t * heads + h, j) += dcoef * hidden;
            const double dhidden = dcoef * w;
            double dact = dhidden;
            if (glu) {
              dact = dhidden * gates[slot];
              const double dgate = dhidden * act_a;
              if (gate.requires_grad()) {
                auto gg = gate.grad().row(e);
                for (std::size_t i = 0; i < dm; ++i) gg[i] += dgate * xt[i];
              }
              if (x.requires_grad()) {
                auto gx = x.grad().row(t);
                auto wg = gate.value().row(e);
                for (std::size_t i = 0; i < dm; ++i) gx[i] += dgate * wg[i];
              }
            }
            const double da = dact * activate_grad(act, a);
            if (down.requires_grad()) {
              auto gu = down.grad().row(e);
              for (std::size_t i = 0; i < dm; ++i) gu[i] += da * xt[i];
            }
            if (x.requires_grad()) {
              auto gx = x.grad().row(t);
              auto u = down.value().row(e);
              for (std::size_t i = 0; i < dm; ++i) gx[i] += da * u[i];
            }
          }
        }
      }
    });
  }
  return y;
}

PeerLayer::PeerLayer(const PeerConfig& config, std::uint64_t seed, std::string prefix)
    : config_((config.validate(), config)),
      prefix_(std::move(prefix)),
      router_(config.router(), seed, prefix_) {
  const std::uint64_t n = config_.n_experts;
  const double std_in = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
  const double std_out = 1.0 / std::sqrt(static_cast<double>(config_.granularity()));
  Rng rng_down(derive_seed(seed, prefix_ + ".experts.down"));
  Rng rng_up(derive_seed(seed, prefix_ + ".experts.up"));
  experts_.down = Var::parameter(normal({n, config_.d_model}, std_in, rng_down));
  experts_.up = Var::parameter(normal({n, config_.d_model}, std_out, rng_up));
  if (config_.glu) {
    Rng rng_gate(derive_seed(seed, prefix_ + ".experts.gate"));
    experts_.gate = Var::parameter(normal({n, config_.d_model}, std_in, rng_gate));
  }
}

Var PeerLayer::forward(Tape& tape, const Var& x, Mode mode, const LayerContext& ctx) {
  if (x.value().cols() != config_.d_model) {
    throw DimensionError("peer layer input " + shape_str(x.shape()) + " for d_model " +
                         std::to_string(config_.d_model));
  }
  const std::size_t tokens = x.value().rows();
  Var flat = x.value().rank() == 2 ? x : reshape(tape, x, {tokens, config_.d_model});
  auto routed = router_.route(tape, flat, mode, ctx.counter);
  Var y = expert_mix(tape, flat, routed.weights, routed.results, config_.heads, experts_,
                     config_.activation, ctx.counter);
  if (ctx.routing) fill_routing(routed, tokens, config_.heads, config_.topk, *ctx.routing);
  return x.value().rank() == 2 ? y : reshape(tape, y, x.shape());
}

PeerOutput PeerLayer::forward(const Tensor& x, Mode mode, OpCounter* counter) {
  recorded_.reset();
  auto tape = std::make_unique<Tape>(mode == Mode::kTrain);
  Var xv = Var::parameter(x);
  PeerOutput out;
  LayerContext ctx{counter, &out.routing};
  Var y = forward(*tape, xv, mode, ctx);
  out.y = y.value();
  if (mode == Mode::kTrain) recorded_ = Recorded{std::move(tape), xv, y};
  return out;
}

PeerGradients PeerLayer::backward(const Tensor& upstream) {
  if (!recorded_) throw StateError("peer backward without a recorded train-mode forward");
  auto params = parameters();
  for (auto& p : params) p.var.zero_grad();
  recorded_->tape->backward(recorded_->y, upstream);

  auto grad_of = [](Var& v) { return v.has_grad() ? v.grad() : Tensor::zeros_like(v.value()); };
  PeerGradients g;
  g.x = grad_of(recorded_->x);
  for (auto& q : router_.query_nets()) g.query.push_back(grad_of(q));
  if (router_.bn_state()) {
    Var s = router_.bn_scale(), b = router_.bn_shift();
    g.bn_scale = grad_of(s);
    g.bn_shift = grad_of(b);
  }
  g.subkeys_c = grad_of(router_.index().c().keys);
  g.subkeys_cp = grad_of(router_.index().c_prime().keys);
  g.down = grad_of(experts_.down);
  g.up = grad_of(experts_.up);
  if (experts_.gate) g.gate = grad_of(experts_.gate);
  recorded_.reset();
  return g;
}

DenseEquivalent PeerLayer::assemble_dense_equivalent(std::span<const double> x) {
  if (config_.topk != 1) {
    throw ConfigError("dense equivalent needs k = 1, got k = " + std::to_string(config_.topk));
  }
  if (config_.score_norm != ScoreNorm::kSoftmaxPerHead || config_.glu) {
    throw ConfigError("dense equivalent needs per-head softmax and no GLU gating");
  }
  if (x.size() != config_.d_model) {
    throw DimensionError("dense equivalent: token of length " + std::to_string(x.size()));
  }
  Tape off(false);
  Var xv = Var::constant(Tensor({1, config_.d_model}, std::vector<double>(x.begin(), x.end())));
  auto routed = router_.route(off, xv, Mode::kInfer, nullptr);
  const std::size_t h = config_.heads;
  DenseEquivalent out{Tensor({config_.d_model, h}), Tensor({config_.d_model, h})};
  for (std::size_t head = 0; head < h; ++head) {
    const auto e = (*routed.results)[head].indices[0];
    for (std::size_t i = 0; i < config_.d_model; ++i) {
      out.w.at(i, head) = experts_.down.value().at(e, i);
      out.v.at(i, head) = experts_.up.value().at(e, i);
    }
  }
  return out;
}

std::vector<ParamRef> PeerLayer::parameters() {
  auto out = router_.parameters();
  out.push_back({prefix_ + ".experts.down", experts_.down});
  out.push_back({prefix_ + ".experts.up", experts_.up});
  if (experts_.gate) out.push_back({prefix_ + ".experts.gate", experts_.gate});
  return out;
}

std::vector<BufferRef> PeerLayer::buffers() { return router_.buffers(); }

UsageAccumulator& record_usage(const Routing& routing, UsageAccumulator& acc) {
  if (routing.weights.size() != routing.indices.size()) {
    throw DimensionError("routing echo has mismatched indices and weights");
  }
  for (std::size_t i = 0; i < routing.indices.size(); ++i) {
    if (routing.indices[i] >= acc.n_experts()) {
      throw DimensionError("expert id " + std::to_string(routing.indices[i]) +
                           " outside a usage accumulator of " +
                           std::to_string(acc.n_experts()));
    }
  }
  for (std::size_t i = 0; i < routing.indices.size(); ++i) {
    acc.z_prime[routing.indices[i]] += routing.weights[i];
  }
  acc.token_count += routing.tokens;
  return acc;
}

}  // namespace peer
