// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/analysis/grad_report.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "peer/core/error.hpp"
#include "peer/core/random.hpp"
#include "peer/lm/model.hpp"

namespace peer {

std::string parameter_group(const std::string& name) {
  const auto has = [&](const char* s) { return name.find(s) != std::string::npos; };
  if (has("embed.")) return "embeddings";
  if (has(".attn.")) return "attention";
  if (has(".subkeys.")) return "subkeys";
  if (has(".query.")) return "query";
  if (has(".bn.")) return "query_bn";
  if (has(".experts.down")) return "expert.down";
  if (has(".experts.up")) return "expert.up";
  if (has(".experts.gate")) return "expert.gate";
  if (has(".values")) return "memory.values";
  if (has(".gate")) return "moe.gate";
  if (has(".ln") || has("final.ln")) return "norms";
  if (name == "head") return "head";
  return "ffw";
}

ModelGradReport model_grad_check(const ModelConfig& config, std::size_t batch, std::size_t time,
                                 std::uint64_t data_seed, const GradCheckOptions& options) {
  if (batch == 0 || time == 0 || time > config.seq_len) {
    throw ConfigError("grad-check batch must be non-empty and fit in seq_len");
  }
  Model model(config);
  Rng rng(derive_seed(data_seed, "grad_check.batch"));
  std::uniform_int_distribution<int> byte(0, 255);
  Batch b;
  b.batch = batch;
  b.time = time;
  for (std::size_t i = 0; i < batch * time; ++i) {
    b.inputs.push_back(static_cast<std::size_t>(byte(rng)));
    b.targets.push_back(static_cast<std::uint32_t>(byte(rng)));
  }

  auto refs = model.parameters();
  std::vector<Var> params;
  for (auto& r : refs) params.push_back(r.var);
  const ScalarFn f = [&](Tape& tape) { return model.loss(tape, b, Mode::kTrain); };
  const GradCheckReport fd = grad_check(f, params, options);

  ModelGradReport report;
  report.max_rel_error = fd.max_rel_error;
  std::map<std::string, GroupError> groups;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto& g = groups[parameter_group(refs[i].name)];
    g.group = parameter_group(refs[i].name);
    ++g.tensors;
    g.max_rel_error = std::max(g.max_rel_error, fd.per_param[i]);
  }
  for (auto& [_, g] : groups) report.groups.push_back(g);

  if (config.middle == MiddleKind::kPeer) {
    // Analytic gradients of one more pass, with the selections echoed.
    for (auto& p : params) p.zero_grad();
    Routing routing;
    Tape tape;
    Var loss = model.loss(tape, b, Mode::kTrain, LayerContext{nullptr, &routing});
    tape.backward(loss);
    const std::set<std::uint64_t> used(routing.indices.begin(), routing.indices.end());
    for (auto& r : refs) {
      if (r.name.find(".experts.") == std::string::npos || !r.var.has_grad()) continue;
      const Tensor& g = r.var.grad();
      for (std::size_t row = 0; row < g.rows(); ++row) {
        if (used.count(row)) continue;
        ++report.unretrieved_rows;
        for (double v : g.row(row)) {
          if (v != 0.0 || std::signbit(v)) report.unretrieved_zero = false;
        }
      }
    }
  }
  return report;
}

}  // namespace peer
