// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "peer/layers/baselines.hpp"
#include "peer/layers/peer_layer.hpp"

namespace peer {

/// Flat UTF-8 `key=value` file. Blank lines and lines starting with '#' are
/// ignored; whitespace around keys and values is trimmed.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

  std::string to_string() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> entries_;
};

enum class MiddleKind { kDense, kPkm, kPeer, kMoe };

MiddleKind parse_middle_kind(std::string_view name);
std::string_view middle_kind_name(MiddleKind kind);

struct ModelConfig {
  std::size_t n_blocks = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t seq_len = 256;
  std::size_t vocab = 256;
  Activation activation = Activation::kGelu;
  MiddleKind middle = MiddleKind::kDense;
  PeerConfig peer;
  PkmConfig pkm;
  MoeConfig moe;
  std::uint64_t seed = 0;

  // The block whose FFW is swapped: floor(n_blocks / 2).
  std::size_t middle_block() const { return n_blocks / 2; }
  // Copies d_model (and the dense d_ff default) into the middle-layer configs.
  void sync();
  void validate() const;
};

struct TrainConfig {
  std::uint64_t steps = 200;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::uint64_t warmup = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t checkpoint_interval = 0;  // 0 = only at the end
  std::uint64_t seed = 0;                 // batch sampling stream

  void validate() const;
};

struct DataConfig {
  std::string path;
  double val_fraction = 0.1;
};

struct SweepConfig {
  double budget = 2e11;  // MACs
  std::vector<MiddleKind> methods{MiddleKind::kDense, MiddleKind::kPeer};
  std::vector<std::size_t> d_models{32, 48, 64};
  double wall_clock_cap = 0.0;  // seconds per configuration, 0 = none
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  SweepConfig sweep;
  bool bias_accounting = true;

  // Unknown keys or unparsable values throw ConfigError.
  static RunConfig from(const KeyValueConfig& kv);
  static RunConfig load(const std::filesystem::path& path);
  KeyValueConfig to_kv() const;
};

// Every key accepted by RunConfig::from, in documentation order.
const std::vector<std::string>& known_config_keys();

}  // namespace peer
