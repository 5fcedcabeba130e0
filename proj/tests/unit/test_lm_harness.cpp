// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "peer/analysis/accounting.hpp"
#include "peer/core/error.hpp"
#include "peer/lm/checkpoint.hpp"
#include "peer/lm/trainer.hpp"
#include "synthetic_corpus.hpp"

namespace peer {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("peer_lm_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig tiny_model(MiddleKind middle = MiddleKind::kDense) {
  ModelConfig m;
  m.n_blocks = 2;
  m.d_model = 16;
  m.n_heads = 2;
  m.d_ff = 32;
  m.seq_len = 16;
  m.middle = middle;
  m.peer.n_experts = 64;
  m.peer.heads = 2;
  m.peer.topk = 2;
  m.peer.query_dim = 8;
  m.pkm.n_memories = 64;
  m.pkm.heads = 2;
  m.pkm.topk = 2;
  m.pkm.query_dim = 8;
  m.moe.n_experts = 2;
  m.moe.d_ff = 32;
  m.seed = 3;
  m.sync();
  return m;
}

TEST(Config, ParsesFlatKeyValueText) {
  const auto kv = KeyValueConfig::parse(
      "# desk run\n model.n_blocks = 4 \n\npeer.n_experts=1024\nmodel.middle=peer\n");
  const RunConfig cfg = RunConfig::from(kv);
  EXPECT_EQ(cfg.model.n_blocks, 4u);
  EXPECT_EQ(cfg.model.peer.n_experts, 1024u);
  EXPECT_EQ(cfg.model.middle, MiddleKind::kPeer);
}

TEST(Config, UnknownKeyIsAnError) {
  EXPECT_THROW(RunConfig::from(KeyValueConfig::parse("model.colour=blue\n")), ConfigError);
  EXPECT_THROW(RunConfig::from(KeyValueConfig::parse("model.n_blocks=two\n")), ConfigError);
  EXPECT_THROW(KeyValueConfig::parse("no equals sign\n"), ConfigError);
}

TEST(Config, RoundTripsThroughText) {
  RunConfig a;
  a.model.d_model = 48;
  a.model.middle = MiddleKind::kMoe;
  a.train.lr = 3e-4;
  a.sweep.d_models = {16, 24};
  const RunConfig b = RunConfig::from(KeyValueConfig::parse(a.to_kv().to_string()));
  EXPECT_EQ(b.to_kv().to_string(), a.to_kv().to_string());
  EXPECT_EQ(known_config_keys().size(), a.to_kv().entries().size());
}

TEST(Config, MoeExpertCountIsBounded) {
  ModelConfig m = tiny_model(MiddleKind::kMoe);
  m.moe.n_experts = 17;
  EXPECT_THROW(Model{m}, ConfigError);
}

TEST(Model, MiddleLayerSitsInBlockHalfOfN) {
  const ModelConfig m = tiny_model(MiddleKind::kPeer);
  EXPECT_EQ(m.middle_block(), 1u);
  Model model(m);
  std::set<std::string> names;
  for (const auto& p : model.parameters()) names.insert(p.name);
  EXPECT_TRUE(names.count("block.0.ffw.w_in"));
  EXPECT_FALSE(names.count("block.1.ffw.w_in"));
  EXPECT_TRUE(names.count("peer.experts.down"));
  EXPECT_EQ(model.middle().kind(), "peer");
}

TEST(Model, SwappingTheMiddleLayerLeavesOtherTensorsIdentical) {
  Model dense(tiny_model(MiddleKind::kDense));
  std::map<std::string, Tensor> base;
  for (const auto& p : dense.parameters()) base[p.name] = p.var.value();
  for (MiddleKind k : {MiddleKind::kPeer, MiddleKind::kPkm, MiddleKind::kMoe}) {
    Model other(tiny_model(k));
    std::size_t shared = 0;
    for (const auto& p : other.parameters()) {
      auto it = base.find(p.name);
      if (it == base.end()) continue;
      EXPECT_EQ(it->second, p.var.value()) << p.name;
      ++shared;
    }
    EXPECT_EQ(shared, base.size() - 2);  // all but dense.w_in / dense.w_out
  }
}

TEST(Model, ParameterCountMatchesAccounting) {
  for (MiddleKind k : {MiddleKind::kDense, MiddleKind::kPeer, MiddleKind::kPkm, MiddleKind::kMoe}) {
    Model model(tiny_model(k));
    EXPECT_EQ(model.parameter_count(), model_cost(tiny_model(k), false).total);
  }
}

TEST(Checkpoint, RoundTripsAndValidates) {
  const fs::path dir = temp_dir("ckpt");
  const std::vector<NamedTensor> entries{{"a", Tensor::matrix({{1, 2}, {3, 4}})},
                                         {"b.c", Tensor::vector({-1.5})}};
  write_checkpoint(dir / "x.ckpt", entries);
  const auto back = read_checkpoint(dir / "x.ckpt");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "a");
  EXPECT_EQ(back[0].tensor, entries[0].tensor);
  EXPECT_EQ(back[1].tensor, entries[1].tensor);

  std::ifstream in(dir / "x.ckpt", std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "PEERCKPT");

  {
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "NOTACKPT";
  }
  EXPECT_THROW(read_checkpoint(dir / "bad.ckpt"), IoError);
  fs::resize_file(dir / "x.ckpt", fs::file_size(dir / "x.ckpt") - 3);
  EXPECT_THROW(read_checkpoint(dir / "x.ckpt"), IoError);
  EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Corpus, ValidationBytesNeverEnterTrainingWindows) {
  std::vector<std::uint8_t> bytes(1000);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = i < 900 ? 'a' + i % 3 : 'Z';
  const Corpus corpus(bytes, 0.1);
  EXPECT_EQ(corpus.train().size(), 900u);
  for (std::uint64_t step = 1; step < 200; ++step) {
    const Batch b = sample_batch(corpus.train(), 4, 32, 9, step);
    for (auto t : b.inputs) EXPECT_NE(t, std::size_t{'Z'});
    for (auto t : b.targets) EXPECT_NE(t, std::uint32_t{'Z'});
  }
}

TEST(Corpus, BatchesDependOnlyOnSeedAndStep) {
  const auto bytes = testing::synthetic_corpus(5000, 1);
  const Batch a = sample_batch(bytes, 3, 16, 4, 10);
  const Batch b = sample_batch(bytes, 3, 16, 4, 10);
  const Batch c = sample_batch(bytes, 3, 16, 4, 11);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_NE(a.inputs, c.inputs);
  for (std::size_t i = 0; i + 1 < 16; ++i) EXPECT_EQ(a.inputs[i + 1], a.targets[i]);
}

TEST(Corpus, EvaluationWindowsPredictEveryByteOnce) {
  const auto bytes = testing::synthetic_corpus(1000, 2);
  const auto windows = evaluation_windows(bytes, 64);
  std::size_t predicted = 0;
  for (const auto& w : windows) predicted += w.targets.size();
  EXPECT_EQ(predicted, bytes.size() - 1);
  EXPECT_TRUE(evaluation_windows(std::vector<std::uint8_t>(1), 8).empty());
}

TEST(Perplexity, UniformLogitsGive256) {
  Model model(tiny_model());
  for (auto& p : model.parameters()) {
    if (p.name == "head") p.var.value().fill(0.0);
  }
  const auto bytes = testing::synthetic_corpus(300, 3);
  EXPECT_NEAR(evaluate_perplexity(model, bytes), 256.0, 1e-9);
}

TEST(Perplexity, EmptySplitIsAnError) {
  Model model(tiny_model());
  EXPECT_THROW(evaluate_perplexity(model, {}), ConfigError);
}

TEST(Perplexity, MatchesSecondPassAverage) {
  Model model(tiny_model(MiddleKind::kPeer));
  const auto bytes = testing::synthetic_corpus(1000, 4);
  double total = 0.0;
  std::size_t count = 0;
  for (const Batch& w : evaluation_windows(bytes, model.config().seq_len)) {
    Tape off(false);
    const Tensor logits = model.logits(off, w, Mode::kInfer).value();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      const auto row = logits.row(r);
      double mx = row[0];
      for (double v : row) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      total += std::log(z) + mx - row[w.targets[r]];
      ++count;
    }
  }
  EXPECT_NEAR(evaluate_perplexity(model, bytes), std::exp(total / double(count)), 1e-9);
}

TrainConfig fast_train(std::uint64_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch = 8;
  t.lr = 1e-2;
  t.warmup = 20;
  t.seed = 5;
  return t;
}

TEST(Train, PeriodicCorpusIsLearned) {
  const Corpus corpus(testing::periodic_corpus("abcd", 4000), 0.1);
  Model model(tiny_model());
  Trainer trainer(model, corpus, fast_train(200));
  StepMetrics last;
  trainer.run(200, [&](const StepMetrics& m) { last = m; });
  EXPECT_EQ(last.step, 200u);
  EXPECT_LT(last.loss, 0.1);
  EXPECT_LT(evaluate_perplexity(model, corpus.validation()), 1.1);
}

TEST(Train, ZeroLearningRateLeavesLossUnchanged) {
  const Corpus corpus(testing::synthetic_corpus(4000, 5), 0.1);
  Model model(tiny_model(MiddleKind::kPeer));
  TrainConfig t = fast_train(3);
  t.lr = 0.0;
  Trainer trainer(model, corpus, t);
  const Batch b = sample_batch(corpus.train(), 4, 16, 1, 1);
  const double first = trainer.step_on(b);
  EXPECT_EQ(trainer.step_on(b), first);
  EXPECT_EQ(trainer.step_on(b), first);
}

TEST(Train, WarmupIsLinear) {
  const Corpus corpus(testing::synthetic_corpus(4000, 5), 0.1);
  Model model(tiny_model());
  TrainConfig t = fast_train(3);
  t.lr = 1e-3;
  t.warmup = 100;
  Trainer trainer(model, corpus, t);
  EXPECT_DOUBLE_EQ(trainer.learning_rate(50), 5e-4);
  EXPECT_DOUBLE_EQ(trainer.learning_rate(100), 1e-3);
  EXPECT_DOUBLE_EQ(trainer.learning_rate(5000), 1e-3);
}

TEST(Train, ResumeReproducesTheUninterruptedRun) {
  const Corpus corpus(testing::synthetic_corpus(8000, 6), 0.1);
  const fs::path dir = temp_dir("resume");
  std::vector<double> straight, resumed;
  {
    Model model(tiny_model(MiddleKind::kPeer));
    Trainer trainer(model, corpus, fast_train(8));
    trainer.run(8, [&](const StepMetrics& m) { straight.push_back(m.loss); });
  }
  {
    Model model(tiny_model(MiddleKind::kPeer));
    Trainer trainer(model, corpus, fast_train(8));
    trainer.run(4, [&](const StepMetrics& m) { resumed.push_back(m.loss); });
    trainer.save_checkpoint(dir / "mid.ckpt");
  }
  {
    Model model(tiny_model(MiddleKind::kPeer));
    Trainer trainer(model, corpus, fast_train(8));
    trainer.load_checkpoint(dir / "mid.ckpt");
    EXPECT_EQ(trainer.state().step, 4u);
    trainer.run(8, [&](const StepMetrics& m) { resumed.push_back(m.loss); });
  }
  EXPECT_EQ(straight, resumed);
}

TEST(Train, NonFiniteLossAbortsWithDiagnostic) {
  const Corpus corpus(testing::synthetic_corpus(4000, 7), 0.1);
  Model model(tiny_model());
  for (auto& p : model.parameters()) {
    if (p.name == "head") p.var.value()[0] = NAN;
  }
  Trainer trainer(model, corpus, fast_train(3));
  try {
    trainer.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("head="), std::string::npos) << msg;
  }
}

TEST(Train, MetricsRowFormat) {
  const StepMetrics m{12, 1.5, std::exp(1.5), 1000.0, 4096};
  EXPECT_EQ(std::string(kMetricsHeader), "step,loss,ppl,tokens_per_s,mac_per_token");
  EXPECT_EQ(metrics_row(m).substr(0, 7), "12,1.5,");
  EXPECT_EQ(metrics_row(m).substr(metrics_row(m).size() - 10), ",1000,4096");
}

}  // namespace
}  // namespace peer
