// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

namespace peer::testing {

// English-like prose from a small phrase grammar with Zipf-weighted word
// choice. Same (size, seed) gives the same bytes.
std::vector<std::uint8_t> synthetic_corpus(std::size_t size, std::uint64_t seed);

// `pattern` repeated until `size` bytes.
std::vector<std::uint8_t> periodic_corpus(const char* pattern, std::size_t size);

}  // namespace peer::testing
