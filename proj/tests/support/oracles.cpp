// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace peer::testing {

TensorMap snapshot(FeedForward& layer) {
  TensorMap out;
  for (auto& p : layer.parameters()) out[p.name] = p.var.value();
  for (auto& b : layer.buffers()) out[b.name] = *b.tensor;
  return out;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = a.cols(), q = b.cols();
  Tensor out({n, q});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < m; ++l) s += a.at(i, l) * b.at(l, j);
      out.at(i, j) = s;
    }
  }
  return out;
}

OracleRouting oracle_route(const TensorMap& p, const OracleRouter& r, const Tensor& x,
                           bool train_mode) {
  const std::size_t tokens = x.rows();
  const std::size_t qd = r.query_dim, half = qd / 2;
  const std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(double(r.n_keys))));
  // Queries [tokens x heads*qd].
  Tensor q({tokens, r.heads * qd});
  for (std::size_t h = 0; h < r.heads; ++h) {
    const Tensor qh = naive_matmul(x, p.at(r.prefix + ".query." + std::to_string(h) + ".w"));
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t c = 0; c < qd; ++c) q.at(t, h * qd + c) = qh.at(t, c);
    }
  }
  if (r.query_bn) {
    const Tensor& scale = p.at(r.prefix + ".bn.scale");
    const Tensor& shift = p.at(r.prefix + ".bn.shift");
    for (std::size_t f = 0; f < q.cols(); ++f) {
      double mean, var;
      if (train_mode) {
        mean = 0.0;
        for (std::size_t t = 0; t < tokens; ++t) mean += q.at(t, f);
        mean /= double(tokens);
        var = 0.0;
        for (std::size_t t = 0; t < tokens; ++t) var += (q.at(t, f) - mean) * (q.at(t, f) - mean);
        var /= double(tokens);
      } else {
        mean = p.at(r.prefix + ".bn.mean")[f];
        var = p.at(r.prefix + ".bn.var")[f];
      }
      for (std::size_t t = 0; t < tokens; ++t) {
        q.at(t, f) = (q.at(t, f) - mean) / std::sqrt(var + r.bn_eps) * scale[f] + shift[f];
      }
    }
  }
  const Tensor& c = p.at(r.prefix + ".subkeys.c");
  const Tensor& cp = p.at(r.prefix + ".subkeys.cp");

  OracleRouting out;
  for (std::size_t t = 0; t < tokens; ++t) {
    std::vector<double> token_scores;
    for (std::size_t h = 0; h < r.heads; ++h) {
      // Score every full key concat(c[i], c'[j]).
      std::vector<double> scores(r.n_keys);
      for (std::size_t i = 0; i < side; ++i) {
        for (std::size_t j = 0; j < side; ++j) {
          double s = 0.0;
          for (std::size_t l = 0; l < half; ++l) s += q.at(t, h * qd + l) * c.at(i, l);
          for (std::size_t l = 0; l < half; ++l) s += q.at(t, h * qd + half + l) * cp.at(j, l);
          scores[i * side + j] = s;
        }
      }
      std::vector<std::uint64_t> order(r.n_keys);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](auto a, auto b) { return scores[a] > scores[b]; });
      order.resize(r.topk);
      std::vector<double> s;
      for (auto id : order) s.push_back(scores[id]);
      out.ids.push_back(order);
      out.weights.push_back(s);
      token_scores.insert(token_scores.end(), s.begin(), s.end());
    }
    // Normalize.
    const std::size_t base = t * r.heads;
    if (r.norm == ScoreNorm::kSigmoid) {
      for (std::size_t h = 0; h < r.heads; ++h) {
        for (double& w : out.weights[base + h]) w = 1.0 / (1.0 + std::exp(-w));
      }
    } else {
      const bool joint = r.norm == ScoreNorm::kSoftmaxJoint;
      const std::size_t groups = joint ? 1 : r.heads;
      const std::size_t per = joint ? r.heads * r.topk : r.topk;
      for (std::size_t gi = 0; gi < groups; ++gi) {
        double mx = -INFINITY;
        for (std::size_t e = 0; e < per; ++e) {
          const std::size_t flat = gi * per + e;
          mx = std::max(mx, out.weights[base + flat / r.topk][flat % r.topk]);
        }
        double z = 0.0;
        for (std::size_t e = 0; e < per; ++e) {
          const std::size_t flat = gi * per + e;
          z += std::exp(out.weights[base + flat / r.topk][flat % r.topk] - mx);
        }
        for (std::size_t e = 0; e < per; ++e) {
          const std::size_t flat = gi * per + e;
          double& w = out.weights[base + flat / r.topk][flat % r.topk];
          w = std::exp(w - mx) / z;
        }
      }
    }
  }
  return out;
}

namespace {

OracleRouter router_of(const std::string& prefix, std::uint64_t n, std::size_t h, std::size_t k,
                       std::size_t qd, bool bn, double eps, ScoreNorm norm) {
  return {prefix, n, h, k, qd, bn, eps, norm};
}

}  // namespace

Tensor oracle_peer_forward(const TensorMap& p, const PeerConfig& c, const std::string& prefix,
                           const Tensor& x, bool train_mode, OracleRouting* routing) {
  const auto r = oracle_route(p, router_of(prefix, c.n_experts, c.heads, c.topk, c.query_dim,
                                           c.query_bn, c.bn_eps, c.score_norm),
                              x, train_mode);
  const Tensor& down = p.at(prefix + ".experts.down");
  const Tensor& up = p.at(prefix + ".experts.up");
  const Tensor* gate = c.glu ? &p.at(prefix + ".experts.gate") : nullptr;
  Tensor y({x.rows(), c.d_model});
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (std::size_t h = 0; h < c.heads; ++h) {
      for (std::size_t s = 0; s < c.topk; ++s) {
        const std::uint64_t e = r.ids[t * c.heads + h][s];
        const double g = r.weights[t * c.heads + h][s];
        double a = 0.0, b = 0.0;
        for (std::size_t m = 0; m < c.d_model; ++m) a += down.at(e, m) * x.at(t, m);
        double hidden = activate(c.activation, a);
        if (gate) {
          for (std::size_t m = 0; m < c.d_model; ++m) b += gate->at(e, m) * x.at(t, m);
          hidden *= b;
        }
        for (std::size_t m = 0; m < c.d_model; ++m) y.at(t, m) += g * hidden * up.at(e, m);
      }
    }
  }
  if (routing) *routing = r;
  return y;
}

Tensor oracle_pkm_forward(const TensorMap& p, const PkmConfig& c, const std::string& prefix,
                          const Tensor& x, bool train_mode, OracleRouting* routing) {
  const auto r = oracle_route(p, router_of(prefix, c.n_memories, c.heads, c.topk, c.query_dim,
                                           c.query_bn, c.bn_eps, c.score_norm),
                              x, train_mode);
  const Tensor& values = p.at(prefix + ".values");
  Tensor y({x.rows(), c.d_model});
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (std::size_t h = 0; h < c.heads; ++h) {
      for (std::size_t s = 0; s < c.topk; ++s) {
        const std::uint64_t e = r.ids[t * c.heads + h][s];
        const double g = r.weights[t * c.heads + h][s];
        for (std::size_t m = 0; m < c.d_model; ++m) y.at(t, m) += g * values.at(e, m);
      }
    }
  }
  if (routing) *routing = r;
  return y;
}

}  // namespace peer::testing
