// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/lm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_map>

#include "peer/analysis/accounting.hpp"
#include "peer/analysis/usage.hpp"
#include "peer/core/error.hpp"

namespace peer {

namespace {

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

Tensor scalar(double v) { return Tensor({1}, v); }

const Tensor& find_entry(const std::unordered_map<std::string, const Tensor*>& index,
                         const std::string& name, const Shape& shape) {
  auto it = index.find(name);
  if (it == index.end()) throw IoError("checkpoint lacks tensor '" + name + "'");
  if (it->second->shape() != shape) {
    throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                  ", expected " + shape_str(shape));
  }
  return *it->second;
}

std::unordered_map<std::string, const Tensor*> index_entries(const std::vector<NamedTensor>& e) {
  std::unordered_map<std::string, const Tensor*> out;
  for (const auto& nt : e) out.emplace(nt.name, &nt.tensor);
  return out;
}

}  // namespace

std::string metrics_row(const StepMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.6g,%llu",
                static_cast<unsigned long long>(m.step), m.loss, m.ppl, m.tokens_per_s,
                static_cast<unsigned long long>(m.mac_per_token));
  return buf;
}

Trainer::Trainer(Model& model, const Corpus& corpus, const TrainConfig& config)
    : model_(model), corpus_(corpus), config_(config), params_(model.parameters()) {
  config_.validate();
  if (corpus_.train().size() < model_.config().seq_len + 1) {
    throw ConfigError("training split of " + std::to_string(corpus_.train().size()) +
                      " bytes is shorter than one window of seq_len+1");
  }
  state_.seed = config_.seed;
  for (const auto& p : params_) {
    state_.adam_m.emplace(p.name, Tensor::zeros_like(p.var.value()));
    state_.adam_v.emplace(p.name, Tensor::zeros_like(p.var.value()));
  }
  mac_per_token_ = model_cost(model_.config(), false).mac_per_token;
}

double Trainer::learning_rate(std::uint64_t step) const {
  if (config_.warmup == 0 || step >= config_.warmup) return config_.lr;
  return config_.lr * static_cast<double>(step) / static_cast<double>(config_.warmup);
}

double Trainer::step_on(const Batch& batch) {
  for (auto& p : params_) p.var.zero_grad();
  Tape tape;
  Var loss = model_.loss(tape, batch, Mode::kTrain);
  const double value = loss.value().item();
  const std::uint64_t t = state_.step + 1;
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << t << "; parameter norms:";
    for (const auto& p : params_) msg << ' ' << p.name << '=' << l2_norm(p.var.value());
    throw NumericError(msg.str());
  }
  tape.backward(loss);

  const double lr = learning_rate(t);
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
  for (auto& p : params_) {
    auto w = p.var.value().data();
    auto m = state_.adam_m.at(p.name).data();
    auto v = state_.adam_v.at(p.name).data();
    if (!p.var.has_grad()) continue;
    auto g = p.var.grad().data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
  state_.step = t;
  state_.running_loss = t == 1 ? value : 0.99 * state_.running_loss + 0.01 * value;
  return value;
}

StepMetrics Trainer::step() {
  const auto& mc = model_.config();
  Batch batch = sample_batch(corpus_.train(), config_.batch, mc.seq_len, state_.seed,
                             state_.step + 1);
  const auto start = std::chrono::steady_clock::now();
  const double loss = step_on(batch);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  StepMetrics m;
  m.step = state_.step;
  m.loss = loss;
  m.ppl = std::exp(loss);
  m.tokens_per_s = secs > 0.0 ? static_cast<double>(batch.inputs.size()) / secs : 0.0;
  m.mac_per_token = mac_per_token_;
  return m;
}

void Trainer::run(std::uint64_t last_step, const std::function<void(const StepMetrics&)>& on_step,
                  const std::filesystem::path& checkpoint_dir) {
  while (state_.step < last_step) {
    StepMetrics m = step();
    if (on_step) on_step(m);
    if (!checkpoint_dir.empty() && config_.checkpoint_interval &&
        state_.step % config_.checkpoint_interval == 0) {
      save_checkpoint(checkpoint_dir / ("step_" + std::to_string(state_.step) + ".ckpt"));
    }
  }
}

std::vector<NamedTensor> Trainer::checkpoint_entries() {
  std::vector<NamedTensor> out = model_entries(model_);
  for (const auto& [name, t] : state_.adam_m) out.push_back({"adam.m." + name, t});
  for (const auto& [name, t] : state_.adam_v) out.push_back({"adam.v." + name, t});
  out.push_back({"train.step", scalar(static_cast<double>(state_.step))});
  // Split the 64-bit seed so both halves are exact in a double.
  out.push_back({"train.seed", Tensor({2}, std::vector<double>{
                                             static_cast<double>(state_.seed >> 32),
                                             static_cast<double>(state_.seed & 0xffffffffu)})});
  out.push_back({"train.running_loss", scalar(state_.running_loss)});
  return out;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) {
  write_checkpoint(path, checkpoint_entries());
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const auto entries = read_checkpoint(path);
  const auto index = index_entries(entries);
  load_model_entries(model_, entries);
  for (auto& [name, t] : state_.adam_m) t = find_entry(index, "adam.m." + name, t.shape());
  for (auto& [name, t] : state_.adam_v) t = find_entry(index, "adam.v." + name, t.shape());
  state_.step = static_cast<std::uint64_t>(find_entry(index, "train.step", {1}).item());
  const Tensor& seed = find_entry(index, "train.seed", {2});
  state_.seed = (static_cast<std::uint64_t>(seed[0]) << 32) | static_cast<std::uint64_t>(seed[1]);
  state_.running_loss = find_entry(index, "train.running_loss", {1}).item();
}

std::vector<NamedTensor> model_entries(Model& model) {
  std::vector<NamedTensor> out;
  for (const auto& p : model.parameters()) out.push_back({p.name, p.var.value()});
  for (const auto& b : model.buffers()) out.push_back({b.name, *b.tensor});
  return out;
}

void load_model_entries(Model& model, const std::vector<NamedTensor>& entries) {
  const auto index = index_entries(entries);
  for (auto& p : model.parameters()) {
    p.var.value() = find_entry(index, p.name, p.var.value().shape());
  }
  for (auto& b : model.buffers()) *b.tensor = find_entry(index, b.name, b.tensor->shape());
}

double evaluate_perplexity(Model& model, std::span<const std::uint8_t> data) {
  const auto windows = evaluation_windows(data, model.config().seq_len);
  if (windows.empty()) throw ConfigError("cannot evaluate perplexity on an empty split");
  double total = 0.0;
  std::size_t count = 0;
  for (const Batch& w : windows) {
    Tape off(false);
    const double mean = model.loss(off, w, Mode::kInfer).value().item();
    total += mean * static_cast<double>(w.targets.size());
    count += w.targets.size();
  }
  return std::exp(total / static_cast<double>(count));
}

void collect_usage(Model& model, std::span<const std::uint8_t> data, UsageAccumulator& acc) {
  const auto windows = evaluation_windows(data, model.config().seq_len);
  if (windows.empty()) throw ConfigError("cannot collect usage on an empty split");
  const auto kind = model.config().middle;
  if (kind != MiddleKind::kPeer && kind != MiddleKind::kPkm) {
    throw ConfigError("middle layer '" + std::string(middle_kind_name(kind)) +
                      "' has no product-key router");
  }
  for (const Batch& w : windows) {
    Tape off(false);
    Routing routing;
    model.logits(off, w, Mode::kInfer, LayerContext{nullptr, &routing});
    record_usage(routing, acc);
  }
}

}  // namespace peer
