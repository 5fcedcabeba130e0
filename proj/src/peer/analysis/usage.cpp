// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/analysis/usage.hpp"

#include <cmath>

#include "peer/core/error.hpp"

namespace peer {

UsageMetrics expert_usage_metrics(const UsageAccumulator& acc) {
  const auto& z = acc.z_prime;
  double total = 0.0;
  std::size_t used = 0;
  for (double v : z) {
    if (v < 0.0 || !std::isfinite(v)) throw NumericError("usage accumulator holds a negative or non-finite entry");
    total += v;
    used += v != 0.0;
  }
  if (!(total > 0.0)) throw NumericError("usage accumulator is all zero");
  double neg_entropy = 0.0;
  for (double v : z) {
    if (v > 0.0) {
      const double p = v / total;
      neg_entropy += p * std::log(p);
    }
  }
  const double n = static_cast<double>(z.size());
  // Clamp the rounding residue of a perfectly uniform distribution.
  const double kl = std::max(0.0, std::log(n) + neg_entropy);
  return {static_cast<double>(used) / n, kl};
}

}  // namespace peer
