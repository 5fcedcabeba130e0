// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "peer/peer_c.h"

namespace {

struct ConfigHandle {
  peer_config* p = nullptr;
  ConfigHandle() { EXPECT_EQ(peer_config_create(&p), PEER_OK); }
  ~ConfigHandle() { peer_config_destroy(p); }
};

std::string get(const peer_config* c, const char* key) {
  char buf[256];
  size_t len = 0;
  EXPECT_EQ(peer_config_get(c, key, buf, sizeof buf, &len), PEER_OK);
  return std::string(buf, len);
}

void small_model(peer_config* c) {
  const char* kv[][2] = {{"model.n_blocks", "1"},  {"model.d_model", "8"},
                         {"model.n_heads", "2"},   {"model.d_ff", "16"},
                         {"model.seq_len", "8"},   {"model.middle", "peer"},
                         {"peer.n_experts", "16"}, {"peer.heads", "2"},
                         {"peer.topk", "2"},       {"peer.query_dim", "4"},
                         {"train.batch", "2"}};
  for (auto& p : kv) ASSERT_EQ(peer_config_set(c, p[0], p[1]), PEER_OK) << p[0];
}

TEST(CApi, StatusNamesAndVersion) {
  EXPECT_STREQ(peer_status_name(PEER_OK), "ok");
  EXPECT_STRNE(peer_status_name(PEER_ERR_CONFIG), peer_status_name(PEER_ERR_IO));
  EXPECT_GT(std::strlen(peer_version()), 0u);
}

TEST(CApi, UnknownKeyIsAConfigError) {
  ConfigHandle c;
  EXPECT_EQ(peer_config_set(c.p, "model.widht", "3"), PEER_ERR_CONFIG);
  EXPECT_NE(std::string(peer_last_error()).find("widht"), std::string::npos);
  EXPECT_EQ(peer_config_set(c.p, "model.d_model", "32"), PEER_OK);
  EXPECT_STREQ(peer_last_error(), "");
  EXPECT_EQ(get(c.p, "model.d_model"), "32");
}

TEST(CApi, LoadRejectsUnknownKeysAndMissingFiles) {
  const auto path = std::filesystem::temp_directory_path() / "peer_capi_bad.cfg";
  std::ofstream(path) << "model.d_model=16\nbogus.key=1\n";
  peer_config* c = nullptr;
  EXPECT_EQ(peer_config_load(path.c_str(), &c), PEER_ERR_CONFIG);
  EXPECT_EQ(c, nullptr);
  EXPECT_EQ(peer_config_load("/nonexistent/peer.cfg", &c), PEER_ERR_IO);
}

TEST(CApi, SaveAndLoadRoundTrip) {
  ConfigHandle c;
  small_model(c.p);
  const auto path = std::filesystem::temp_directory_path() / "peer_capi_rt.cfg";
  ASSERT_EQ(peer_config_save(c.p, path.c_str()), PEER_OK);
  peer_config* back = nullptr;
  ASSERT_EQ(peer_config_load(path.c_str(), &back), PEER_OK);
  EXPECT_EQ(get(back, "peer.n_experts"), "16");
  EXPECT_EQ(get(back, "model.middle"), "peer");
  peer_config_destroy(back);
}

TEST(CApi, NullArgumentsAndSmallBuffers) {
  EXPECT_EQ(peer_config_create(nullptr), PEER_ERR_ARGUMENT);
  ConfigHandle c;
  char tiny[2];
  size_t len = 0;
  EXPECT_EQ(peer_config_get(c.p, "model.d_model", tiny, sizeof tiny, &len), PEER_ERR_ARGUMENT);
  EXPECT_GT(len, 1u);
  EXPECT_EQ(peer_config_get(c.p, nullptr, tiny, sizeof tiny, &len), PEER_ERR_ARGUMENT);
  peer_config_destroy(nullptr);
  peer_index_destroy(nullptr);
}

TEST(CApi, IndexRoutesAgree) {
  peer_index* idx = nullptr;
  ASSERT_EQ(peer_index_create(256, 16, 3, &idx), PEER_OK);
  EXPECT_EQ(peer_index_size(idx), 256u);
  EXPECT_EQ(peer_index_dim(idx), 16u);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> q(16);
    for (double& v : q) v = n(rng);
    std::vector<uint64_t> a(8), b(8);
    std::vector<double> sa(8), sb(8);
    peer_op_count ca{}, cb{};
    ASSERT_EQ(peer_index_retrieve(idx, PEER_RETRIEVE_PRODUCT, q.data(), 16, 8, a.data(),
                                  sa.data(), &ca),
              PEER_OK);
    ASSERT_EQ(peer_index_retrieve(idx, PEER_RETRIEVE_EXHAUSTIVE, q.data(), 16, 8, b.data(),
                                  sb.data(), &cb),
              PEER_OK);
    EXPECT_EQ(a, b);
    EXPECT_EQ(sa, sb);
    EXPECT_EQ(ca.macs, 16u * 16 + 64);
    EXPECT_EQ(cb.macs, 256u * 16);
  }
  std::vector<double> q(15);
  uint64_t id;
  double s;
  EXPECT_EQ(peer_index_retrieve(idx, PEER_RETRIEVE_PRODUCT, q.data(), 15, 1, &id, &s, nullptr),
            PEER_ERR_DIMENSION);
  peer_index_destroy(idx);
  EXPECT_EQ(peer_index_create(200, 16, 3, &idx), PEER_ERR_CONFIG);
}

TEST(CApi, UsageMetrics) {
  peer_usage* u = nullptr;
  ASSERT_EQ(peer_usage_create(4, &u), PEER_OK);
  double f, kl;
  EXPECT_EQ(peer_usage_metrics(u, &f, &kl), PEER_ERR_NUMERIC);
  ASSERT_EQ(peer_usage_add(u, 0, 0.5), PEER_OK);
  ASSERT_EQ(peer_usage_add(u, 1, 0.5), PEER_OK);
  EXPECT_EQ(peer_usage_add(u, 4, 0.5), PEER_ERR_DIMENSION);
  ASSERT_EQ(peer_usage_metrics(u, &f, &kl), PEER_OK);
  EXPECT_EQ(f, 0.5);
  EXPECT_NEAR(kl, std::log(2.0), 1e-12);
  double z[4];
  ASSERT_EQ(peer_usage_distribution(u, z, 4), PEER_OK);
  EXPECT_EQ(z[0], 0.5);
  EXPECT_EQ(z[3], 0.0);
  EXPECT_EQ(peer_usage_distribution(u, z, 3), PEER_ERR_ARGUMENT);
  peer_usage_destroy(u);
}

TEST(CApi, ScalingLaw) {
  const peer_scaling_params p{1, 1, 1, 0.5, 0.5, 0.5, 1};
  double v = 0;
  ASSERT_EQ(peer_scaling_law(&p, 4, 4, 4, &v), PEER_OK);
  EXPECT_NEAR(v, 2.25, 1e-12);
  EXPECT_EQ(peer_scaling_law(&p, 0, 4, 4, &v), PEER_ERR_CONFIG);
}

TEST(CApi, CostsFollowTheConfiguration) {
  ConfigHandle c;
  small_model(c.p);
  ASSERT_EQ(peer_config_set(c.p, "accounting.bias", "false"), PEER_OK);
  peer_layer_cost lc{};
  ASSERT_EQ(peer_layer_cost_of(c.p, &lc), PEER_OK);
  EXPECT_EQ(lc.granularity, 4.0);
  EXPECT_EQ(lc.expert, 16u);
  EXPECT_EQ(lc.active, 4u * 16);
  peer_model_cost mc{};
  ASSERT_EQ(peer_model_cost_of(c.p, &mc), PEER_OK);
  peer_model* m = nullptr;
  ASSERT_EQ(peer_model_create(c.p, &m), PEER_OK);
  EXPECT_EQ(peer_model_parameter_count(m), mc.total);
  peer_model_destroy(m);
}

TEST(CApi, TrainSaveLoadEvaluate) {
  const auto dir = std::filesystem::temp_directory_path() / "peer_capi_train";
  std::filesystem::create_directories(dir);
  {
    std::ofstream data(dir / "data.txt");
    for (int i = 0; i < 400; ++i) data << "the cat sat on the mat. ";
  }
  ConfigHandle c;
  small_model(c.p);
  ASSERT_EQ(peer_config_set(c.p, "data.path", (dir / "data.txt").c_str()), PEER_OK);
  ASSERT_EQ(peer_config_set(c.p, "train.lr", "0.01"), PEER_OK);
  peer_trainer* t = nullptr;
  ASSERT_EQ(peer_trainer_create(c.p, &t), PEER_OK) << peer_last_error();
  peer_step_metrics first{}, last{};
  ASSERT_EQ(peer_trainer_step(t, &first), PEER_OK);
  for (int i = 0; i < 40; ++i) ASSERT_EQ(peer_trainer_step(t, &last), PEER_OK);
  EXPECT_EQ(peer_trainer_current_step(t), 41u);
  EXPECT_LT(last.loss, first.loss);
  char row[256];
  size_t len;
  ASSERT_EQ(peer_format_metrics(&last, row, sizeof row, &len), PEER_OK);
  EXPECT_EQ(std::string(row).rfind("41,", 0), 0u);
  EXPECT_STREQ(peer_metrics_header(), "step,loss,ppl,tokens_per_s,mac_per_token");

  double ppl = 0;
  ASSERT_EQ(peer_trainer_validation_perplexity(t, &ppl), PEER_OK);
  const auto ckpt = dir / "model.ckpt";
  ASSERT_EQ(peer_model_save(peer_trainer_model(t), ckpt.c_str()), PEER_OK);
  peer_model* m = nullptr;
  ASSERT_EQ(peer_model_load(ckpt.c_str(), &m), PEER_OK) << peer_last_error();
  const std::string text(200, 'x');
  double p1 = 0, p2 = 0;
  ASSERT_EQ(peer_model_perplexity(peer_trainer_model(t),
                                  reinterpret_cast<const uint8_t*>(text.data()), text.size(),
                                  &p1),
            PEER_OK);
  ASSERT_EQ(peer_model_perplexity(m, reinterpret_cast<const uint8_t*>(text.data()), text.size(),
                                  &p2),
            PEER_OK);
  EXPECT_EQ(p1, p2);
  peer_usage* u = nullptr;
  ASSERT_EQ(peer_model_usage(m, reinterpret_cast<const uint8_t*>(text.data()), text.size(), &u),
            PEER_OK);
  EXPECT_EQ(peer_usage_size(u), 16u);
  EXPECT_GT(peer_usage_tokens(u), 0u);
  peer_usage_destroy(u);
  peer_model_destroy(m);
  EXPECT_EQ(peer_model_load((dir / "missing.ckpt").c_str(), &m), PEER_ERR_IO);
  peer_trainer_destroy(t);
}

TEST(CApi, GradCheckOnTinyModel) {
  ConfigHandle c;
  small_model(c.p);
  peer_grad_summary s{};
  int groups = 0;
  ASSERT_EQ(peer_grad_check(
                c.p, 2, 8, 7, 1e-5,
                [](const peer_grad_group*, void* user) { ++*static_cast<int*>(user); }, &groups,
                &s),
            PEER_OK);
  EXPECT_GT(groups, 3);
  EXPECT_LE(s.max_rel_error, 1e-3);
  EXPECT_EQ(s.unretrieved_zero, 1);
}

}  // namespace
