// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace peer {

// Instrumentation for compute accounting. "macs" counts multiply-accumulates
// and the additions that combine candidate scores; "comparisons" counts
// ordering comparisons made by top-k selection.
struct OpCounter {
  std::uint64_t macs = 0;
  std::uint64_t comparisons = 0;

  OpCounter& operator+=(const OpCounter& o) {
    macs += o.macs;
    comparisons += o.comparisons;
    return *this;
  }
};

}  // namespace peer
