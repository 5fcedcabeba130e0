// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "peer/core/tensor.hpp"

namespace peer {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed and a label, so that
// each parameter's init depends only on (seed, name).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t counter);

Tensor uniform(Shape shape, double lo, double hi, Rng& rng);
Tensor normal(Shape shape, double stddev, Rng& rng);

}  // namespace peer
