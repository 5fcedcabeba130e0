// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/lm/model.hpp"

#include <cmath>
#include <string>

#include "peer/core/error.hpp"
#include "peer/core/random.hpp"

namespace peer {

namespace {

Var init_normal(std::uint64_t seed, const std::string& name, Shape shape, double stddev) {
  Rng rng(derive_seed(seed, name));
  return Var::parameter(normal(std::move(shape), stddev, rng));
}

}  // namespace

std::unique_ptr<FeedForward> make_middle_layer(const ModelConfig& config) {
  switch (config.middle) {
    case MiddleKind::kDense:
      return std::make_unique<DenseFFW>(
          DenseConfig{config.d_model, config.d_ff, config.activation}, config.seed, "dense");
    case MiddleKind::kPeer:
      return std::make_unique<PeerLayer>(config.peer, config.seed, "peer");
    case MiddleKind::kPkm:
      return std::make_unique<PkmLayer>(config.pkm, config.seed, "pkm");
    case MiddleKind::kMoe:
      return std::make_unique<ExpertChoiceMoE>(config.moe, config.seed, "moe");
  }
  throw ConfigError("unhandled middle layer kind");
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  const std::uint64_t seed = config_.seed;
  const double std_d = 1.0 / std::sqrt(static_cast<double>(d));
  tok_embed_ = init_normal(seed, "embed.tok", {config_.vocab, d}, 1.0);
  pos_embed_ = init_normal(seed, "embed.pos", {config_.seq_len, d}, 0.1);
  for (std::size_t i = 0; i < config_.n_blocks; ++i) {
    const std::string p = "block." + std::to_string(i);
    Block b;
    b.ln1_gain = Var::parameter(Tensor({d}, 1.0));
    b.ln1_bias = Var::parameter(Tensor({d}, 0.0));
    b.qkv = init_normal(seed, p + ".attn.qkv", {d, 3 * d}, std_d);
    b.out = init_normal(seed, p + ".attn.out", {d, d},
                        std_d / std::sqrt(2.0 * static_cast<double>(config_.n_blocks)));
    b.ln2_gain = Var::parameter(Tensor({d}, 1.0));
    b.ln2_bias = Var::parameter(Tensor({d}, 0.0));
    if (i == config_.middle_block()) {
      b.ffw = make_middle_layer(config_);
    } else {
      b.ffw = std::make_unique<DenseFFW>(DenseConfig{d, config_.d_ff, config_.activation}, seed,
                                         p + ".ffw");
    }
    blocks_.push_back(std::move(b));
  }
  lnf_gain_ = Var::parameter(Tensor({d}, 1.0));
  lnf_bias_ = Var::parameter(Tensor({d}, 0.0));
  head_ = init_normal(seed, "head", {d, config_.vocab}, std_d);
}

Var Model::logits(Tape& tape, const Batch& batch, Mode mode, const LayerContext& middle_ctx) {
  const std::size_t tokens = batch.batch * batch.time;
  if (batch.inputs.size() != tokens || tokens == 0) {
    throw DimensionError("batch holds " + std::to_string(batch.inputs.size()) +
                         " inputs for " + std::to_string(batch.batch) + "x" +
                         std::to_string(batch.time));
  }
  if (batch.time > config_.seq_len) {
    throw DimensionError("window of " + std::to_string(batch.time) +
                         " exceeds model seq_len " + std::to_string(config_.seq_len));
  }
  std::vector<std::size_t> positions(tokens);
  for (std::size_t i = 0; i < tokens; ++i) positions[i] = i % batch.time;
  Var x = add(tape, gather_rows(tape, tok_embed_, batch.inputs),
              gather_rows(tape, pos_embed_, positions));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    Var h = layer_norm(tape, x, b.ln1_gain, b.ln1_bias);
    Var attn = causal_attention(tape, matmul(tape, h, b.qkv), batch.batch, batch.time,
                                config_.n_heads);
    x = add(tape, x, matmul(tape, attn, b.out));
    Var h2 = layer_norm(tape, x, b.ln2_gain, b.ln2_bias);
    const LayerContext ctx = i == config_.middle_block() ? middle_ctx : LayerContext{};
    x = add(tape, x, b.ffw->forward(tape, h2, mode, ctx));
  }
  x = layer_norm(tape, x, lnf_gain_, lnf_bias_);
  return matmul(tape, x, head_);
}

Var Model::loss(Tape& tape, const Batch& batch, Mode mode, const LayerContext& middle_ctx) {
  return cross_entropy(tape, logits(tape, batch, mode, middle_ctx), batch.targets);
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out{{"embed.tok", tok_embed_}, {"embed.pos", pos_embed_}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "block." + std::to_string(i);
    Block& b = blocks_[i];
    out.push_back({p + ".ln1.gain", b.ln1_gain});
    out.push_back({p + ".ln1.bias", b.ln1_bias});
    out.push_back({p + ".attn.qkv", b.qkv});
    out.push_back({p + ".attn.out", b.out});
    out.push_back({p + ".ln2.gain", b.ln2_gain});
    out.push_back({p + ".ln2.bias", b.ln2_bias});
    for (auto& ref : b.ffw->parameters()) out.push_back(std::move(ref));
  }
  out.push_back({"final.ln.gain", lnf_gain_});
  out.push_back({"final.ln.bias", lnf_bias_});
  out.push_back({"head", head_});
  return out;
}

std::vector<BufferRef> Model::buffers() {
  std::vector<BufferRef> out;
  for (auto& b : blocks_) {
    for (auto& ref : b.ffw->buffers()) out.push_back(ref);
  }
  return out;
}

std::uint64_t Model::parameter_count() {
  std::uint64_t n = 0;
  for (const auto& p : parameters()) n += p.var.value().numel();
  return n;
}

}  // namespace peer
