// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "peer/core/tensor.hpp"

namespace peer {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline constexpr char kCheckpointMagic[8] = {'P', 'E', 'E', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian): magic "PEERCKPT", version u32, count u32, then per
// entry: name length u32, name bytes, tensor record.
void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries,
                      DType dtype = DType::kFloat64);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

}  // namespace peer
