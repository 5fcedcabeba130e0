// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <vector>

#include "peer/layers/feedforward.hpp"
#include "peer/lm/config.hpp"
#include "peer/lm/corpus.hpp"

namespace peer {

std::unique_ptr<FeedForward> make_middle_layer(const ModelConfig& config);

/// Byte-level decoder-only transformer with pre-norm blocks. Block
/// `middle_block()` uses the configured feedforward replacement; every other
/// block keeps a dense FFW.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  // Logits [batch*time x vocab]. `middle_ctx` is passed to the middle layer.
  Var logits(Tape& tape, const Batch& batch, Mode mode, const LayerContext& middle_ctx = {});
  // Mean next-byte cross-entropy in nats.
  Var loss(Tape& tape, const Batch& batch, Mode mode, const LayerContext& middle_ctx = {});

  FeedForward& middle() { return *blocks_[config_.middle_block()].ffw; }

  std::vector<ParamRef> parameters();
  std::vector<BufferRef> buffers();
  std::uint64_t parameter_count();

 private:
  struct Block {
    Var ln1_gain, ln1_bias;
    Var qkv;  // [d_model x 3*d_model]
    Var out;  // [d_model x d_model]
    Var ln2_gain, ln2_bias;
    std::unique_ptr<FeedForward> ffw;
  };

  ModelConfig config_;
  Var tok_embed_;  // [vocab x d_model]
  Var pos_embed_;  // [seq_len x d_model]
  std::vector<Block> blocks_;
  Var lnf_gain_, lnf_bias_;
  Var head_;  // [d_model x vocab]
};

}  // namespace peer
