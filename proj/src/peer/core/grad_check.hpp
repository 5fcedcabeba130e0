// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "peer/core/autograd.hpp"

namespace peer {

struct GradCheckOptions {
  double step = 1e-5;
  // Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t samples_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<double> per_param;  // max relative error per entry of `params`
};

using ScalarFn = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients of `f` with central differences.
/// Relative error is |analytic - numeric| / max(1, |analytic|).
/// Throws DimensionError if f is not scalar, ConfigError for a step outside
/// [1e-6, 1e-3].
GradCheckReport grad_check(const ScalarFn& f, std::span<Var> params,
                           const GradCheckOptions& options = {});

}  // namespace peer
