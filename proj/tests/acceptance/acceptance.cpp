// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

// Prints one PASS/FAIL line per acceptance criterion. Arguments select a
// subset by number; with none, all nine run.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "peer/analysis/accounting.hpp"
#include "peer/analysis/grad_report.hpp"
#include "peer/analysis/sweep.hpp"
#include "peer/analysis/usage.hpp"
#include "peer/core/random.hpp"
#include "peer/layers/baselines.hpp"
#include "peer/layers/peer_layer.hpp"
#include "peer/lm/checkpoint.hpp"
#include "peer/lm/corpus.hpp"
#include "peer/lm/model.hpp"
#include "peer/lm/trainer.hpp"
#include "peer/retrieval/product_key_index.hpp"
#include "synthetic_corpus.hpp"

namespace fs = std::filesystem;
using namespace peer;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return normal(std::move(shape), 1.0, rng);
}

Outcome retrieval_exactness() {
  const auto t0 = Clock::now();
  std::uint64_t instances = 0, mismatches = 0;
  for (std::uint64_t n : {16ull, 64ull, 256ull, 4096ull, 65536ull}) {
    const std::size_t side = isqrt(n);
    for (std::size_t d : {4u, 16u, 64u}) {
      const auto index = ProductKeyIndex::build(n, d, 0.0, n * 131 + d);
      Rng rng(n ^ (d << 20));
      std::normal_distribution<double> normal(0.0, 1.0);
      std::vector<double> q(d);
      for (std::size_t k : std::set<std::size_t>{1, 4, side}) {
        for (int trial = 0; trial < 1000; ++trial) {
          for (double& v : q) v = normal(rng);
          // Every tenth query repeats a half to force score ties.
          if (trial % 10 == 9) std::copy(q.begin(), q.begin() + d / 2, q.begin() + d / 2);
          const auto a = index.retrieve_topk(q, k);
          const auto b = index.retrieve_exhaustive(q, k);
          ++instances;
          if (a.indices != b.indices || a.scores != b.scores) ++mismatches;
        }
      }
    }
  }
  const double s = seconds_since(t0);
  return {mismatches == 0 && s < 120.0,
          fmt("%llu instances, %llu mismatches, %.1f s", (unsigned long long)instances,
              (unsigned long long)mismatches, s)};
}

Outcome complexity_counts() {
  std::uint64_t configs = 0, wrong = 0;
  for (std::uint64_t n : {16ull, 64ull, 256ull, 4096ull, 65536ull}) {
    const std::size_t side = isqrt(n);
    for (std::size_t d : {4u, 16u, 64u}) {
      const auto index = ProductKeyIndex::build(n, d, 0.0, 7);
      const Tensor q = random_tensor({d}, n + d);
      for (std::size_t k : std::set<std::size_t>{1, 4, 16, side}) {
        if (k > side) continue;
        OpCounter p, e;
        index.retrieve_topk(q.data(), k, &p);
        index.retrieve_exhaustive(q.data(), k, &e);
        ++configs;
        if (p.macs != side * d + k * k || e.macs != n * d) ++wrong;
      }
    }
  }
  const double ratio = (256.0 * 64 + 256) / (65536.0 * 64);
  OpCounter p, e;
  const auto index = ProductKeyIndex::build(65536, 64, 0.0, 9);
  const Tensor q = random_tensor({64}, 3);
  index.retrieve_topk(q.data(), 16, &p);
  index.retrieve_exhaustive(q.data(), 16, &e);
  const double measured = double(p.macs) / double(e.macs);
  return {wrong == 0 && measured == ratio && ratio < 0.005,
          fmt("%llu configs, %llu wrong; ratio %.6f", (unsigned long long)configs,
              (unsigned long long)wrong, measured)};
}

Outcome dense_equivalent_identity() {
  double worst = 0.0;
  int layers = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (std::size_t h : {1u, 2u, 4u, 8u}) {
      PeerConfig c;
      c.n_experts = seed % 2 ? 256 : 4096;
      c.heads = h;
      c.topk = 1;
      c.d_model = 6 + seed % 5;
      c.query_dim = 8;
      c.query_bn = seed % 3 == 0;
      PeerLayer layer(c, seed * 17 + h);
      const Tensor x = random_tensor({1, c.d_model}, seed + 1000 * h);
      const Tensor y = layer.forward(x, Mode::kInfer).y;
      const auto eq = layer.assemble_dense_equivalent(x.data());
      for (std::size_t i = 0; i < c.d_model; ++i) {
        double yi = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
          double a = 0.0;
          for (std::size_t m = 0; m < c.d_model; ++m) a += eq.w.at(m, j) * x[m];
          yi += eq.v.at(i, j) * activate(c.activation, a);
        }
        worst = std::max(worst, std::abs(y[i] - yi));
      }
      ++layers;
    }
  }
  return {worst <= 1e-12, fmt("%d layers, max abs diff %.3g", layers, worst)};
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  ModelConfig m;
  m.n_blocks = 1;
  m.d_model = 8;
  m.n_heads = 2;
  m.d_ff = 16;
  m.seq_len = 8;
  m.middle = MiddleKind::kPeer;
  m.peer.n_experts = 16;
  m.peer.heads = 2;
  m.peer.topk = 2;
  m.peer.query_dim = 4;
  Outcome out;
  const std::set<std::string> required{"attention", "embeddings", "expert.down", "expert.gate",
                                       "expert.up",  "query",      "query_bn",    "subkeys"};
  std::set<std::string> seen;
  double worst = 0.0;
  std::size_t rows = 0;
  for (bool glu : {false, true}) {
    m.peer.glu = glu;
    m.sync();
    const auto report = model_grad_check(m, 2, 8, 11 + glu);
    worst = std::max(worst, report.max_rel_error);
    rows += report.unretrieved_rows;
    out.pass = out.pass && report.unretrieved_zero && report.max_rel_error <= 1e-3;
    for (const auto& g : report.groups) {
      seen.insert(g.group);
      if (g.max_rel_error > 1e-3) out.detail += " " + g.group + " too large;";
    }
  }
  for (const auto& g : required) {
    if (!seen.count(g)) {
      out.pass = false;
      out.detail += " missing group " + g + ";";
    }
  }
  const double s = seconds_since(t0);
  out.pass = out.pass && s < 300.0;
  out.detail = fmt("%zu groups, max rel err %.3g, %zu unretrieved rows all zero, %.1f s",
                   seen.size(), worst, rows, s) + out.detail;
  return out;
}

Outcome brute_force_oracles() {
  double worst = 0.0;
  std::uint64_t route_mismatch = 0;
  const std::uint64_t sizes[] = {16, 64, 256};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor x = random_tensor({6, 4}, seed + 400);
    PeerConfig pc;
    pc.n_experts = sizes[seed % 3];
    pc.heads = 1 + seed % 4;
    pc.topk = 1 + seed % 4;
    pc.d_model = 4;
    pc.query_dim = 8;
    pc.glu = seed % 5 == 0;
    pc.query_bn = seed % 2 == 0;
    pc.score_norm = seed % 7 == 0 ? ScoreNorm::kSigmoid : ScoreNorm::kSoftmaxPerHead;
    PeerLayer peer(pc, seed);
    PkmConfig kc;
    kc.n_memories = sizes[(seed + 1) % 3];
    kc.heads = 1 + seed % 3;
    kc.topk = 1 + seed % 4;
    kc.d_model = 4;
    kc.query_dim = 8;
    kc.query_bn = seed % 2 == 1;
    PkmLayer pkm(kc, seed + 1);
    for (Mode mode : {Mode::kInfer, Mode::kTrain}) {
      const bool train = mode == Mode::kTrain;
      testing::OracleRouting r1, r2;
      const Tensor w1 =
          testing::oracle_peer_forward(testing::snapshot(peer), pc, "peer", x, train, &r1);
      const auto g1 = peer.forward(x, mode);
      const Tensor w2 =
          testing::oracle_pkm_forward(testing::snapshot(pkm), kc, "pkm", x, train, &r2);
      Tape tape;
      Routing routing;
      const Tensor g2 = pkm.forward(tape, Var::constant(x), mode, {nullptr, &routing}).value();
      for (std::size_t i = 0; i < w1.numel(); ++i) {
        worst = std::max({worst, std::abs(w1[i] - g1.y[i]), std::abs(w2[i] - g2[i])});
      }
      for (std::size_t th = 0; th < r1.ids.size(); ++th) {
        for (std::size_t j = 0; j < pc.topk; ++j) {
          route_mismatch += g1.routing.indices[th * pc.topk + j] != r1.ids[th][j];
        }
      }
      for (std::size_t th = 0; th < r2.ids.size(); ++th) {
        for (std::size_t j = 0; j < kc.topk; ++j) {
          route_mismatch += routing.indices[th * kc.topk + j] != r2.ids[th][j];
        }
      }
    }
  }
  return {worst <= 1e-10 && route_mismatch == 0,
          fmt("100 seeds, max abs diff %.3g, %llu routing mismatches", worst,
              (unsigned long long)route_mismatch)};
}

Outcome usage_oracle() {
  UsageAccumulator uniform(64);
  for (double& v : uniform.z_prime) v = 0.7;
  UsageAccumulator one_hot(1u << 20);
  one_hot.z_prime[777] = 2.5;
  UsageAccumulator half(4);
  half.z_prime = {0.5, 0.5, 0.0, 0.0};
  const auto a = expert_usage_metrics(uniform);
  const auto b = expert_usage_metrics(one_hot);
  const auto c = expert_usage_metrics(half);
  const bool pass = std::abs(a.unevenness) <= 1e-9 && a.usage == 1.0 &&
                    std::abs(b.unevenness - std::log(1048576.0)) <= 1e-9 &&
                    std::abs(c.unevenness - std::log(2.0)) <= 1e-9 &&
                    std::abs(c.usage - 0.5) <= 1e-9;
  return {pass, fmt("uniform %.3g, one-hot %.10f, half %.10f usage %.3f", a.unevenness,
                    b.unevenness, c.unevenness, c.usage)};
}

struct DeskRun {
  double first_loss = 0.0;
  double tail_loss = 0.0;
  std::vector<double> losses;
  std::vector<NamedTensor> final_model;
  UsageMetrics usage{};
  double val_ppl = 0.0;
};

ModelConfig desk_model(bool bn) {
  ModelConfig m;
  m.n_blocks = 2;
  m.d_model = 64;
  m.n_heads = 4;
  m.d_ff = 256;
  m.seq_len = 128;
  m.middle = MiddleKind::kPeer;
  m.peer.n_experts = 4096;
  m.peer.heads = 4;
  m.peer.topk = 4;
  m.peer.query_bn = bn;
  m.sync();
  return m;
}

TrainConfig desk_train() {
  TrainConfig t;
  t.steps = 2000;
  t.batch = 8;
  t.lr = 1e-3;
  t.warmup = 100;
  t.seed = 1;
  return t;
}

DeskRun desk_run(const Corpus& corpus, bool bn, std::uint64_t pause_at, const fs::path& ckpt) {
  DeskRun r;
  Model model(desk_model(bn));
  Trainer trainer(model, corpus, desk_train());
  auto record = [&](const StepMetrics& m) {
    if (m.step == 1) r.first_loss = m.loss;
    r.losses.push_back(m.loss);
    if (m.step % 250 == 0) {
      std::fprintf(stderr, "  [bn=%d] step %llu loss %.4f running %.4f\n", bn,
                   (unsigned long long)m.step, m.loss, trainer.state().running_loss);
    }
  };
  if (pause_at > 0) {
    trainer.run(pause_at, record);
    trainer.save_checkpoint(ckpt);
  }
  trainer.run(2000, record);
  double tail = 0.0;
  for (std::size_t i = r.losses.size() - 100; i < r.losses.size(); ++i) tail += r.losses[i];
  r.tail_loss = tail / 100.0;
  r.final_model = model_entries(model);
  r.val_ppl = evaluate_perplexity(model, corpus.validation());
  UsageAccumulator acc(4096);
  collect_usage(model, corpus.validation(), acc);
  r.usage = expert_usage_metrics(acc);
  return r;
}

bool bitwise_equal(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) return false;
    const auto x = a[i].tensor.data(), y = b[i].tensor.data();
    if (std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

Outcome desk_training() {
  const auto t0 = Clock::now();
  const Corpus corpus(testing::synthetic_corpus(1'000'000, 2026), 0.1);
  const fs::path dir = fs::temp_directory_path() / "peer_acceptance_desk";
  fs::create_directories(dir);
  const fs::path ckpt = dir / "step_1900.ckpt";

  const DeskRun with_bn = desk_run(corpus, true, 1900, ckpt);

  // Resume from step 1900 in a fresh process state.
  Model model(desk_model(true));
  Trainer trainer(model, corpus, desk_train());
  trainer.load_checkpoint(ckpt);
  std::vector<double> resumed;
  trainer.run(2000, [&](const StepMetrics& m) { resumed.push_back(m.loss); });
  const std::vector<double> straight(with_bn.losses.end() - 100, with_bn.losses.end());
  const bool resume_ok = resumed == straight && bitwise_equal(model_entries(model),
                                                              with_bn.final_model);

  const DeskRun without_bn = desk_run(corpus, false, 0, {});
  const double drop = 1.0 - with_bn.tail_loss / with_bn.first_loss;
  const double drop_nobn = 1.0 - without_bn.tail_loss / without_bn.first_loss;
  const double s = seconds_since(t0);
  const char* direction = with_bn.usage.unevenness < without_bn.usage.unevenness
                              ? "BN more balanced"
                              : "BN not more balanced";
  std::printf(
      "      desk: loss %.4f -> %.4f (drop %.1f%%), val ppl %.3f; without BN drop %.1f%%, val "
      "ppl %.3f\n"
      "      desk: validation usage with BN %.4f unevenness %.4f; without BN usage %.4f "
      "unevenness %.4f (%s)\n",
      with_bn.first_loss, with_bn.tail_loss, 100 * drop, with_bn.val_ppl, 100 * drop_nobn,
      without_bn.val_ppl, with_bn.usage.usage, with_bn.usage.unevenness, without_bn.usage.usage,
      without_bn.usage.unevenness, direction);
  return {drop >= 0.30 && resume_ok && s < 1800.0,
          fmt("loss drop %.1f%%, resume bitwise %s, %.0f s", 100 * drop,
              resume_ok ? "yes" : "no", s)};
}

Outcome accounting_consistency() {
  RunConfig base;
  base.bias_accounting = false;
  base.model.seq_len = 128;
  base.train.batch = 8;
  base.sweep.methods = {MiddleKind::kDense, MiddleKind::kPeer, MiddleKind::kPkm,
                        MiddleKind::kMoe};
  const SweepPlan plan = plan_isoflop_sweep(base);
  const fs::path path = fs::temp_directory_path() / "peer_acceptance_count.ckpt";
  Outcome out;
  std::size_t checked = 0;
  for (const ModelConfig& m : plan.models) {
    Model model(m);
    write_checkpoint(path, model_entries(model));
    std::uint64_t sum = 0;
    for (const auto& e : read_checkpoint(path)) sum += e.tensor.numel();
    const ModelCost cost = model_cost(m, false);
    if (sum != cost.total + cost.buffers) {
      out.pass = false;
      out.detail += fmt(" %s d=%zu: %llu vs %llu;", std::string(middle_kind_name(m.middle)).c_str(),
                        m.d_model, (unsigned long long)sum,
                        (unsigned long long)(cost.total + cost.buffers));
    }
    ++checked;
    if (m.middle == MiddleKind::kPeer) {
      const CostModel peer = middle_layer_cost(m, false);
      ModelConfig dm = m;
      dm.middle = MiddleKind::kDense;
      const CostModel dense = middle_layer_cost(dm, false);
      if (peer.granularity != double(m.peer.heads * m.peer.topk) ||
          peer.active != m.peer.heads * m.peer.topk * peer.expert || peer.active >= dense.total ||
          peer.total <= dense.total) {
        out.pass = false;
        out.detail += fmt(" peer d=%zu ordering;", m.d_model);
      }
    }
  }
  out.detail = fmt("%zu sweep configs", checked) + out.detail;
  return out;
}

Outcome scaling_law() {
  const ScalingLawParams hand{1, 1, 1, 0.5, 0.5, 0.5, 1};
  const double v = evaluate_scaling_law(hand, 4, 4, 4);
  bool monotone = true;
  const ScalingLawParams p{406.4, 410.7, 120.0, 0.45, 0.34, 0.28, 1.69};
  int points = 0;
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 10; ++j) {
      for (int l = 0; l < 10; ++l) {
        const double P = 1e5 * std::pow(3.0, i), D = 1e7 * std::pow(3.0, j),
                     G = std::pow(2.0, l);
        const double f = evaluate_scaling_law(p, P, D, G);
        monotone = monotone && evaluate_scaling_law(p, P * 1.5, D, G) < f &&
                   evaluate_scaling_law(p, P, D * 1.5, G) < f &&
                   evaluate_scaling_law(p, P, D, G * 1.5) < f;
        ++points;
      }
    }
  }
  return {std::abs(v - 2.25) <= 1e-12 && monotone,
          fmt("f(4,4,4) = %.15f, monotone over %d points: %s", v, points,
              monotone ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"retrieval exactness", retrieval_exactness},
      {"complexity counts", complexity_counts},
      {"dense-equivalent identity", dense_equivalent_identity},
      {"full-model gradient check", gradient_check},
      {"brute-force oracles", brute_force_oracles},
      {"usage metrics", usage_oracle},
      {"desk training", desk_training},
      {"accounting consistency", accounting_consistency},
      {"scaling law", scaling_law},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
