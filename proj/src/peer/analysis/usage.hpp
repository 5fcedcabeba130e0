// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

namespace peer {

/// Accumulated router mass per expert, z'_i = sum over tokens of g_i(x).
struct UsageAccumulator {
  std::vector<double> z_prime;
  std::uint64_t token_count = 0;

  explicit UsageAccumulator(std::uint64_t n_experts = 0) : z_prime(n_experts, 0.0) {}
  std::uint64_t n_experts() const { return z_prime.size(); }
};

struct UsageMetrics {
  double usage = 0.0;       // fraction of experts with non-zero mass
  double unevenness = 0.0;  // KL(z || uniform) in nats
};

// z = z'/|z'|_1; usage = #{z_i != 0}/N; unevenness = log N + sum z_i log z_i.
// Throws NumericError when the accumulator holds no mass.
UsageMetrics expert_usage_metrics(const UsageAccumulator& acc);

}  // namespace peer
