// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/analysis/sweep.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>

#include "peer/analysis/accounting.hpp"
#include "peer/core/error.hpp"
#include "peer/lm/trainer.hpp"

namespace peer {

SweepPlan plan_isoflop_sweep(const RunConfig& base) {
  const SweepConfig& s = base.sweep;
  if (s.methods.empty() || s.d_models.empty()) throw ConfigError("isoFLOP sweep grid is empty");
  if (!(s.budget > 0.0)) throw ConfigError("isoFLOP budget must be positive");
  SweepPlan plan;
  std::uint64_t largest = 0;
  for (MiddleKind method : s.methods) {
    for (std::size_t d : s.d_models) {
      ModelConfig m = base.model;
      m.middle = method;
      m.d_model = d;
      m.d_ff = 4 * d;
      m.moe.d_ff = 4 * d;
      m.sync();
      m.validate();
      const ModelCost cost = model_cost(m, base.bias_accounting);
      SweepPoint p;
      p.method = method;
      p.d_model = d;
      p.total_params = cost.total;
      p.active_params = cost.active;
      p.mac_per_step = mac_per_step(m, base.train.batch);
      p.steps = static_cast<std::uint64_t>(s.budget / static_cast<double>(p.mac_per_step));
      largest = std::max(largest, p.mac_per_step);
      plan.models.push_back(m);
      plan.points.push_back(p);
    }
  }
  if (s.budget / static_cast<double>(largest) < 10.0) {
    throw ConfigError("budget affords fewer than 10 steps for the largest configuration");
  }
  return plan;
}

std::vector<SweepPoint> isoflop_sweep(const RunConfig& base, const Corpus& corpus,
                                      const std::filesystem::path& out_dir,
                                      const SweepProgress& progress) {
  SweepPlan plan = plan_isoflop_sweep(base);
  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < plan.models.size(); ++i) {
    SweepPoint& p = plan.points[i];
    Model model(plan.models[i]);
    Trainer trainer(model, corpus, base.train);
    const auto start = std::chrono::steady_clock::now();
    while (trainer.state().step < p.steps) {
      trainer.step();
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (base.sweep.wall_clock_cap > 0.0 && elapsed > base.sweep.wall_clock_cap) break;
    }
    p.steps_trained = trainer.state().step;
    p.val_ppl = evaluate_perplexity(model, corpus.validation());
    if (progress) progress(p);
  }
  write_isoflop_csv(out_dir / "isoflop.csv", plan.points);
  write_isoflop_plot_data(out_dir / "isoflop_plot.dat", plan.points);
  return plan.points;
}

void write_isoflop_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kIsoflopHeader << '\n';
  char buf[64];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%.17g", p.val_ppl);
    out << middle_kind_name(p.method) << ',' << p.total_params << ',' << p.active_params << ','
        << p.steps << ',' << buf << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_isoflop_plot_data(const std::filesystem::path& path,
                             const std::vector<SweepPoint>& points) {
  std::map<std::string, std::vector<const SweepPoint*>> curves;
  for (const auto& p : points) curves[std::string(middle_kind_name(p.method))].push_back(&p);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  bool first = true;
  for (const auto& [method, pts] : curves) {
    if (!first) out << "\n\n";
    first = false;
    const SweepPoint* best = pts.front();
    for (const auto* p : pts) {
      if (p->val_ppl < best->val_ppl) best = p;
    }
    out << "# method " << method << " min_total_params " << best->total_params << " min_val_ppl "
        << best->val_ppl << '\n';
    out << "# total_params active_params steps val_ppl\n";
    for (const auto* p : pts) {
      out << p->total_params << ' ' << p->active_params << ' ' << p->steps << ' ' << p->val_ppl
          << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace peer
