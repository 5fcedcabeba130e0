// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace peer {

/// Next-byte prediction batch: inputs[b*time + t] predicts targets[b*time + t].
struct Batch {
  std::size_t batch = 0;
  std::size_t time = 0;
  std::vector<std::size_t> inputs;
  std::vector<std::uint32_t> targets;
};

/// A raw byte stream split once into a training prefix and a validation
/// suffix. Training windows are drawn from the prefix only.
class Corpus {
 public:
  Corpus(std::vector<std::uint8_t> bytes, double val_fraction);
  static Corpus load(const std::filesystem::path& path, double val_fraction);

  std::span<const std::uint8_t> bytes() const { return bytes_; }
  std::span<const std::uint8_t> train() const { return std::span(bytes_).first(split_); }
  std::span<const std::uint8_t> validation() const { return std::span(bytes_).subspan(split_); }
  std::size_t split() const { return split_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t split_ = 0;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

// `batch` random windows of time+1 bytes lying wholly inside `data`. The
// offsets depend only on (seed, step).
Batch sample_batch(std::span<const std::uint8_t> data, std::size_t batch, std::size_t time,
                   std::uint64_t seed, std::uint64_t step);

// Windows that together predict every byte of `data` after the first exactly
// once: [s, s+time] for s = 0, time, 2*time, ...; the last one may be shorter.
std::vector<Batch> evaluation_windows(std::span<const std::uint8_t> data, std::size_t time);

}  // namespace peer
