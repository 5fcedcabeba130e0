// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "peer/core/grad_check.hpp"
#include "peer/lm/config.hpp"

namespace peer {

struct GroupError {
  std::string group;
  std::size_t tensors = 0;
  double max_rel_error = 0.0;
};

struct ModelGradReport {
  std::vector<GroupError> groups;  // sorted by group name
  double max_rel_error = 0.0;
  // Expert rows (down/up/gate) never selected in the checked batch, and
  // whether all of their gradient entries are exactly zero.
  std::size_t unretrieved_rows = 0;
  bool unretrieved_zero = true;
};

// Parameter group of a checkpoint name: "embeddings", "attention", "norms",
// "ffw", "head", "subkeys", "query", "query_bn", "expert.down", ...
std::string parameter_group(const std::string& name);

/// Finite-difference check of the full model's next-byte loss on one random
/// batch of `batch` x `time` bytes (train mode).
ModelGradReport model_grad_check(const ModelConfig& config, std::size_t batch, std::size_t time,
                                 std::uint64_t data_seed, const GradCheckOptions& options = {});

}  // namespace peer
