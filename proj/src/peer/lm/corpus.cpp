// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/lm/corpus.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "peer/core/error.hpp"
#include "peer/core/random.hpp"

namespace peer {

Corpus::Corpus(std::vector<std::uint8_t> bytes, double val_fraction) : bytes_(std::move(bytes)) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw ConfigError("validation fraction must lie in [0, 1)");
  }
  const auto val = static_cast<std::size_t>(
      std::floor(static_cast<double>(bytes_.size()) * val_fraction));
  split_ = bytes_.size() - val;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open data file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Corpus Corpus::load(const std::filesystem::path& path, double val_fraction) {
  return Corpus(read_bytes(path), val_fraction);
}

Batch sample_batch(std::span<const std::uint8_t> data, std::size_t batch, std::size_t time,
                   std::uint64_t seed, std::uint64_t step) {
  if (data.size() < time + 1) {
    throw ConfigError("training data has " + std::to_string(data.size()) +
                      " bytes, fewer than one window of " + std::to_string(time + 1));
  }
  Rng rng(derive_seed(seed, step));
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - time - 1);
  Batch out{batch, time, {}, {}};
  out.inputs.reserve(batch * time);
  out.targets.reserve(batch * time);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t start = pick(rng);
    for (std::size_t t = 0; t < time; ++t) {
      out.inputs.push_back(data[start + t]);
      out.targets.push_back(data[start + t + 1]);
    }
  }
  return out;
}

std::vector<Batch> evaluation_windows(std::span<const std::uint8_t> data, std::size_t time) {
  std::vector<Batch> out;
  if (time == 0) return out;
  for (std::size_t start = 0; start + 1 < data.size(); start += time) {
    const std::size_t len = std::min(time, data.size() - 1 - start);
    Batch w{1, len, {}, {}};
    for (std::size_t t = 0; t < len; ++t) {
      w.inputs.push_back(data[start + t]);
      w.targets.push_back(data[start + t + 1]);
    }
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace peer
