// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

// peer-lab: train, evaluate and inspect PEER language models.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peer/peer_c.h"

namespace fs = std::filesystem;

namespace {

// Raised after a C API failure has been reported.
struct Failure {
  int code;
};

void check(peer_status st, const char* what) {
  if (st == PEER_OK) return;
  std::fprintf(stderr, "peer-lab: %s failed (%s): %s\n", what, peer_status_name(st),
               peer_last_error());
  throw Failure{st == PEER_ERR_CONFIG || st == PEER_ERR_ARGUMENT ? 2 : 1};
}

template <typename T, void (*Destroy)(T*)>
struct Deleter {
  void operator()(T* p) const { Destroy(p); }
};

using Config = std::unique_ptr<peer_config, Deleter<peer_config, peer_config_destroy>>;
using Model = std::unique_ptr<peer_model, Deleter<peer_model, peer_model_destroy>>;
using Trainer = std::unique_ptr<peer_trainer, Deleter<peer_trainer, peer_trainer_destroy>>;
using Usage = std::unique_ptr<peer_usage, Deleter<peer_usage, peer_usage_destroy>>;
using Index = std::unique_ptr<peer_index, Deleter<peer_index, peer_index_destroy>>;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  bool no_bias = false;
  std::vector<std::string> overrides;
};

Config make_config(const Globals& g) {
  peer_config* raw = nullptr;
  if (g.config.empty()) {
    check(peer_config_create(&raw), "creating default config");
  } else {
    check(peer_config_load(g.config.c_str(), &raw), "loading config");
  }
  Config cfg(raw);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "peer-lab: --set expects key=value, got '%s'\n", kv.c_str());
      throw Failure{2};
    }
    check(peer_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()),
          "applying --set");
  }
  if (g.seed) {
    const std::string s = std::to_string(*g.seed);
    check(peer_config_set(cfg.get(), "model.seed", s.c_str()), "setting model.seed");
    check(peer_config_set(cfg.get(), "train.seed", s.c_str()), "setting train.seed");
  }
  if (g.no_bias) check(peer_config_set(cfg.get(), "accounting.bias", "false"), "accounting");
  return cfg;
}

std::string config_value(const peer_config* cfg, const char* key) {
  char buf[512];
  size_t len = 0;
  check(peer_config_get(cfg, key, buf, sizeof buf, &len), key);
  return buf;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::fprintf(stderr, "peer-lab: cannot read %s\n", path.c_str());
    throw Failure{1};
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / name;
}

std::string format_row(const peer_step_metrics& m) {
  char buf[256];
  size_t len = 0;
  check(peer_format_metrics(&m, buf, sizeof buf, &len), "formatting metrics");
  return buf;
}

// ---- subcommands

struct TrainArgs {
  std::string data;
  std::optional<std::uint64_t> steps;
  std::string resume;
  bool quiet = false;
};

int run_train(const Globals& g, const TrainArgs& a) {
  Config cfg = make_config(g);
  if (!a.data.empty()) check(peer_config_set(cfg.get(), "data.path", a.data.c_str()), "data");
  if (a.steps) {
    check(peer_config_set(cfg.get(), "train.steps", std::to_string(*a.steps).c_str()), "steps");
  }
  const std::uint64_t steps = std::stoull(config_value(cfg.get(), "train.steps"));
  const std::uint64_t interval = std::stoull(config_value(cfg.get(), "train.checkpoint_interval"));

  peer_trainer* raw = nullptr;
  check(peer_trainer_create(cfg.get(), &raw), "creating trainer");
  Trainer trainer(raw);
  if (!a.resume.empty()) check(peer_trainer_resume(trainer.get(), a.resume.c_str()), "resume");

  const fs::path csv_path = out_path(g, "metrics.csv");
  std::ofstream csv(csv_path);
  csv << peer_metrics_header() << '\n';
  while (peer_trainer_current_step(trainer.get()) < steps) {
    peer_step_metrics m{};
    check(peer_trainer_step(trainer.get(), &m), "training step");
    const std::string row = format_row(m);
    csv << row << '\n';
    if (!a.quiet && (m.step % 50 == 0 || m.step == 1 || m.step == steps)) {
      std::printf("%s\n", row.c_str());
      std::fflush(stdout);
    }
    if (interval && m.step % interval == 0 && m.step != steps) {
      const auto p = out_path(g, "step_" + std::to_string(m.step) + ".ckpt");
      check(peer_trainer_save(trainer.get(), p.c_str()), "writing checkpoint");
    }
  }
  csv.close();
  const auto final_path = out_path(g, "final.ckpt");
  check(peer_trainer_save(trainer.get(), final_path.c_str()), "writing checkpoint");
  double ppl = 0.0;
  check(peer_trainer_validation_perplexity(trainer.get(), &ppl), "validation");
  std::printf("step=%llu running_loss=%.6f val_ppl=%.6f checkpoint=%s\n",
              static_cast<unsigned long long>(peer_trainer_current_step(trainer.get())),
              peer_trainer_running_loss(trainer.get()), ppl, final_path.c_str());
  return 0;
}

struct DataArgs {
  std::string checkpoint;
  std::string data;
};

// Bytes to evaluate on: the whole --data file, else the validation split of
// the corpus recorded with the checkpoint.
std::vector<std::uint8_t> evaluation_bytes(peer_model* model, const DataArgs& a) {
  if (!a.data.empty()) return read_file(a.data);
  peer_config* raw = nullptr;
  check(peer_model_config(model, &raw), "reading model config");
  Config cfg(raw);
  const std::string path = config_value(cfg.get(), "data.path");
  if (path.empty()) {
    std::fprintf(stderr, "peer-lab: no --data given and the checkpoint records no data.path\n");
    throw Failure{2};
  }
  auto bytes = read_file(path);
  const double frac = std::stod(config_value(cfg.get(), "data.val_fraction"));
  const auto val = static_cast<std::size_t>(std::floor(static_cast<double>(bytes.size()) * frac));
  return {bytes.end() - static_cast<std::ptrdiff_t>(val), bytes.end()};
}

Model load_model(const std::string& path) {
  peer_model* raw = nullptr;
  check(peer_model_load(path.c_str(), &raw), "loading checkpoint");
  return Model(raw);
}

int run_eval(const Globals&, const DataArgs& a) {
  Model model = load_model(a.checkpoint);
  const auto bytes = evaluation_bytes(model.get(), a);
  double ppl = 0.0;
  check(peer_model_perplexity(model.get(), bytes.data(), bytes.size(), &ppl), "evaluation");
  std::printf("ppl=%.17g bytes=%zu\n", ppl, bytes.size());
  return 0;
}

int run_metrics(const Globals& g, const DataArgs& a) {
  Model model = load_model(a.checkpoint);
  const auto bytes = evaluation_bytes(model.get(), a);
  peer_usage* raw = nullptr;
  check(peer_model_usage(model.get(), bytes.data(), bytes.size(), &raw), "collecting usage");
  Usage usage(raw);
  double fraction = 0.0, unevenness = 0.0;
  check(peer_usage_metrics(usage.get(), &fraction, &unevenness), "usage metrics");
  std::vector<double> z(peer_usage_size(usage.get()));
  check(peer_usage_distribution(usage.get(), z.data(), z.size()), "usage distribution");
  std::ofstream csv(out_path(g, "usage.csv"));
  csv << "expert_id,z\n";
  char buf[64];
  for (std::size_t i = 0; i < z.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", z[i]);
    csv << i << ',' << buf << '\n';
  }
  std::printf("usage=%.17g unevenness=%.17g\n", fraction, unevenness);
  return 0;
}

struct BenchArgs {
  std::uint64_t n = 4096;
  std::uint64_t d = 16;
  std::uint64_t k = 8;
  std::uint64_t trials = 1000;
};

int run_retrieve_bench(const Globals& g, const BenchArgs& a) {
  const std::uint64_t seed = g.seed.value_or(0);
  peer_index* raw = nullptr;
  check(peer_index_create(a.n, a.d, seed, &raw), "building index");
  Index index(raw);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> q(a.d), s_prod(a.k), s_exh(a.k);
  std::vector<std::uint64_t> i_prod(a.k), i_exh(a.k);
  std::ofstream csv(out_path(g, "retrieve_bench.csv"));
  csv << "N,d,k,method,macs,comparisons,wall_ns,match\n";
  std::uint64_t mismatches = 0;
  double ns_prod = 0.0, ns_exh = 0.0;
  peer_op_count c_prod{}, c_exh{};
  for (std::uint64_t t = 0; t < a.trials; ++t) {
    for (auto& v : q) v = normal(rng);
    const auto t0 = std::chrono::steady_clock::now();
    check(peer_index_retrieve(index.get(), PEER_RETRIEVE_PRODUCT, q.data(), a.d, a.k,
                              i_prod.data(), s_prod.data(), &c_prod),
          "product-key retrieval");
    const auto t1 = std::chrono::steady_clock::now();
    check(peer_index_retrieve(index.get(), PEER_RETRIEVE_EXHAUSTIVE, q.data(), a.d, a.k,
                              i_exh.data(), s_exh.data(), &c_exh),
          "exhaustive retrieval");
    const auto t2 = std::chrono::steady_clock::now();
    const bool match = i_prod == i_exh && s_prod == s_exh;
    mismatches += !match;
    const auto wp = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
    const auto we = std::chrono::duration_cast<std::chrono::nanoseconds>(t2 - t1).count();
    ns_prod += static_cast<double>(wp);
    ns_exh += static_cast<double>(we);
    const auto row = [&](const char* method, const peer_op_count& c, long long ns) {
      csv << a.n << ',' << a.d << ',' << a.k << ',' << method << ',' << c.macs << ','
          << c.comparisons << ',' << ns << ',' << (match ? 1 : 0) << '\n';
    };
    row("product", c_prod, wp);
    row("exhaustive", c_exh, we);
  }
  const double trials = static_cast<double>(std::max<std::uint64_t>(a.trials, 1));
  std::printf(
      "trials=%llu mismatches=%llu product_macs=%llu exhaustive_macs=%llu "
      "product_ns=%.0f exhaustive_ns=%.0f\n",
      static_cast<unsigned long long>(a.trials), static_cast<unsigned long long>(mismatches),
      static_cast<unsigned long long>(c_prod.macs), static_cast<unsigned long long>(c_exh.macs),
      ns_prod / trials, ns_exh / trials);
  return mismatches == 0 ? 0 : 1;
}

void print_sweep_point(const peer_sweep_point* p, void*) {
  std::printf("method=%s d_model=%llu total_params=%llu active_params=%llu steps=%llu "
              "trained=%llu val_ppl=%.6f\n",
              p->method, static_cast<unsigned long long>(p->d_model),
              static_cast<unsigned long long>(p->total_params),
              static_cast<unsigned long long>(p->active_params),
              static_cast<unsigned long long>(p->steps),
              static_cast<unsigned long long>(p->steps_trained), p->val_ppl);
  std::fflush(stdout);
}

int run_sweep(const Globals& g, const std::string& data, bool dry_run) {
  Config cfg = make_config(g);
  if (!data.empty()) check(peer_config_set(cfg.get(), "data.path", data.c_str()), "data");
  if (dry_run) {
    size_t count = 0;
    std::vector<peer_sweep_point> points(64);
    check(peer_sweep_plan(cfg.get(), points.data(), points.size(), &count), "planning sweep");
    for (size_t i = 0; i < count; ++i) print_sweep_point(&points[i], nullptr);
    return 0;
  }
  fs::create_directories(g.out_dir);
  check(peer_sweep_run(cfg.get(), g.out_dir.c_str(), print_sweep_point, nullptr), "sweep");
  std::printf("wrote %s\n", (fs::path(g.out_dir) / "isoflop.csv").c_str());
  return 0;
}

struct GradArgs {
  std::size_t batch = 2;
  std::size_t time = 8;
  double step = 1e-5;
  double tolerance = 1e-3;
};

void print_group(const peer_grad_group* gr, void* worst) {
  std::printf("group=%s tensors=%llu max_rel_error=%.3e\n", gr->group,
              static_cast<unsigned long long>(gr->tensors), gr->max_rel_error);
  auto* w = static_cast<double*>(worst);
  *w = std::max(*w, gr->max_rel_error);
}

int run_grad_check(const Globals& g, const GradArgs& a) {
  Config cfg = make_config(g);
  if (g.config.empty()) {
    // Tiny full model: one block, d_model 8, PEER with 16 experts.
    const char* tiny[][2] = {
        {"model.n_blocks", "1"},  {"model.d_model", "8"},     {"model.n_heads", "2"},
        {"model.d_ff", "16"},     {"model.seq_len", "8"},     {"model.middle", "peer"},
        {"peer.n_experts", "16"}, {"peer.heads", "2"},        {"peer.topk", "2"},
        {"peer.query_dim", "4"},
    };
    for (const auto& kv : tiny) check(peer_config_set(cfg.get(), kv[0], kv[1]), "tiny config");
  }
  double worst = 0.0;
  peer_grad_summary summary{};
  check(peer_grad_check(cfg.get(), a.batch, a.time, g.seed.value_or(0), a.step, print_group,
                        &worst, &summary),
        "gradient check");
  const bool ok = summary.max_rel_error <= a.tolerance && summary.unretrieved_zero;
  std::printf("max_rel_error=%.3e unretrieved_rows=%llu unretrieved_zero=%d %s\n",
              summary.max_rel_error, static_cast<unsigned long long>(summary.unretrieved_rows),
              summary.unretrieved_zero, ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"peer-lab: parameter efficient expert retrieval experiments"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "flat key=value config file");
  app.add_option("--seed", g.seed, "overrides model.seed and train.seed");
  app.add_option("--out-dir", g.out_dir, "directory for CSVs and checkpoints");
  app.add_option("--set", g.overrides, "config override key=value (repeatable)");
  app.add_flag("--no-bias-accounting", g.no_bias, "charge experts 2*d_model per hidden unit");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train a language model");
  c_train->add_option("--data", train.data, "byte corpus (overrides data.path)");
  c_train->add_option("--steps", train.steps, "train until this step (overrides train.steps)");
  c_train->add_option("--resume", train.resume, "continue from a training checkpoint");
  c_train->add_flag("--quiet", train.quiet, "do not echo metrics rows");

  DataArgs eval;
  auto* c_eval = app.add_subcommand("eval", "validation perplexity of a checkpoint");
  c_eval->add_option("--checkpoint", eval.checkpoint)->required();
  c_eval->add_option("--data", eval.data, "bytes to evaluate (default: validation split)");

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("retrieve-bench", "product-key vs exhaustive retrieval");
  c_bench->add_option("--n", bench.n, "number of experts (perfect square)");
  c_bench->add_option("--d", bench.d, "query length (even)");
  c_bench->add_option("--k", bench.k, "experts retrieved");
  c_bench->add_option("--trials", bench.trials, "random queries");

  std::string sweep_data;
  bool dry_run = false;
  auto* c_sweep = app.add_subcommand("sweep", "isoFLOP sweep over methods and model sizes");
  c_sweep->add_option("--data", sweep_data, "byte corpus (overrides data.path)");
  c_sweep->add_flag("--dry-run", dry_run, "print the planned grid without training");

  DataArgs metrics;
  auto* c_metrics = app.add_subcommand("metrics", "expert usage and unevenness");
  c_metrics->add_option("--checkpoint", metrics.checkpoint)->required();
  c_metrics->add_option("--data", metrics.data, "bytes to route (default: validation split)");

  GradArgs grad;
  auto* c_grad = app.add_subcommand("grad-check", "finite-difference check of the full model");
  c_grad->add_option("--batch", grad.batch);
  c_grad->add_option("--time", grad.time);
  c_grad->add_option("--step", grad.step, "central-difference step in [1e-6, 1e-3]");
  c_grad->add_option("--tolerance", grad.tolerance);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_train) return run_train(g, train);
    if (*c_eval) return run_eval(g, eval);
    if (*c_bench) return run_retrieve_bench(g, bench);
    if (*c_sweep) return run_sweep(g, sweep_data, dry_run);
    if (*c_metrics) return run_metrics(g, metrics);
    if (*c_grad) return run_grad_check(g, grad);
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "peer-lab: %s\n", e.what());
    return 1;
  }
  return 2;
}
