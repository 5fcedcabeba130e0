// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>

#include "peer/lm/checkpoint.hpp"
#include "peer/lm/model.hpp"

namespace peer {

struct UsageAccumulator;

struct StepMetrics {
  std::uint64_t step = 0;
  double loss = 0.0;
  double ppl = 0.0;
  double tokens_per_s = 0.0;
  std::uint64_t mac_per_token = 0;
};

inline constexpr const char* kMetricsHeader = "step,loss,ppl,tokens_per_s,mac_per_token";
std::string metrics_row(const StepMetrics& m);

/// Everything needed to continue a run bit-for-bit: the batch stream is
/// counter-based, so (seed, step) is the complete RNG state.
struct TrainState {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  double running_loss = 0.0;
  std::map<std::string, Tensor> adam_m;
  std::map<std::string, Tensor> adam_v;
};

class Trainer {
 public:
  Trainer(Model& model, const Corpus& corpus, const TrainConfig& config);

  // Runs one Adam step on the batch drawn for the next step index.
  StepMetrics step();
  // One Adam step on an explicit batch; returns the pre-update loss.
  double step_on(const Batch& batch);

  // Steps until state().step == last_step. Writes a checkpoint every
  // checkpoint_interval steps into `checkpoint_dir` when it is non-empty.
  void run(std::uint64_t last_step, const std::function<void(const StepMetrics&)>& on_step,
           const std::filesystem::path& checkpoint_dir = {});

  const TrainState& state() const { return state_; }
  double learning_rate(std::uint64_t step) const;

  // Model parameters, buffers, optimizer moments and train.* scalars.
  std::vector<NamedTensor> checkpoint_entries();
  void save_checkpoint(const std::filesystem::path& path);
  void load_checkpoint(const std::filesystem::path& path);

 private:
  Model& model_;
  const Corpus& corpus_;
  TrainConfig config_;
  TrainState state_;
  std::vector<ParamRef> params_;
  std::uint64_t mac_per_token_ = 0;
};

// Model parameters and buffers only.
std::vector<NamedTensor> model_entries(Model& model);
// Restores every parameter and buffer of `model` from `entries`; extra
// entries are ignored, missing or mis-shaped ones throw.
void load_model_entries(Model& model, const std::vector<NamedTensor>& entries);

/// exp(mean next-byte cross-entropy) over `data`, teacher forced, in infer mode.
double evaluate_perplexity(Model& model, std::span<const std::uint8_t> data);

/// Accumulates the middle layer's router scores over `data` (infer mode).
void collect_usage(Model& model, std::span<const std::uint8_t> data, UsageAccumulator& acc);

}  // namespace peer
