// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "peer/lm/config.hpp"
#include "peer/lm/corpus.hpp"

namespace peer {

struct SweepPoint {
  MiddleKind method = MiddleKind::kDense;
  std::size_t d_model = 0;
  std::uint64_t total_params = 0;
  std::uint64_t active_params = 0;
  std::uint64_t mac_per_step = 0;
  std::uint64_t steps = 0;          // floor(budget / mac_per_step)
  std::uint64_t steps_trained = 0;  // fewer than `steps` only under a wall-clock cap
  double val_ppl = 0.0;
};

struct SweepPlan {
  std::vector<ModelConfig> models;
  std::vector<SweepPoint> points;  // same order, metrics not yet filled
};

// One configuration per (method, d_model), methods outermost, with d_ff =
// 4 * d_model for the dense FFWs and MoE experts. Throws
// ConfigError for an empty grid or when the most expensive configuration
// affords fewer than 10 steps.
SweepPlan plan_isoflop_sweep(const RunConfig& base);

inline constexpr const char* kIsoflopHeader = "method,total_params,active_params,steps,val_ppl";

using SweepProgress = std::function<void(const SweepPoint&)>;

// Trains every planned configuration in turn, then writes isoflop.csv and
// isoflop_plot.dat into `out_dir`.
std::vector<SweepPoint> isoflop_sweep(const RunConfig& base, const Corpus& corpus,
                                      const std::filesystem::path& out_dir,
                                      const SweepProgress& progress = {});

void write_isoflop_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points);
// Whitespace-separated blocks, one per method (total_params, active_params,
// val_ppl), blank-line separated, with the per-method minimum in a comment.
void write_isoflop_plot_data(const std::filesystem::path& path,
                             const std::vector<SweepPoint>& points);

}  // namespace peer
