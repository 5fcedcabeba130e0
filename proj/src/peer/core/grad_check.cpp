// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/core/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "peer/core/error.hpp"
#include "peer/core/random.hpp"

namespace peer {

namespace {

double evaluate(const ScalarFn& f) {
  Tape off(false);
  Var out = f(off);
  if (out.value().numel() != 1) {
    throw DimensionError("grad_check: function output has shape " + shape_str(out.shape()));
  }
  return out.value()[0];
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, std::span<Var> params,
                           const GradCheckOptions& options) {
  if (!(options.step >= 1e-6 && options.step <= 1e-3)) {
    throw ConfigError("grad_check: step must lie in [1e-6, 1e-3]");
  }
  for (Var& p : params) p.zero_grad();
  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var out = f(tape);
    if (out.value().numel() != 1) {
      throw DimensionError("grad_check: function output has shape " + shape_str(out.shape()));
    }
    if (out.requires_grad()) tape.backward(out);
    for (Var& p : params) {
      analytic.push_back(p.has_grad() ? p.grad() : Tensor::zeros_like(p.value()));
    }
  }

  GradCheckReport report;
  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& value = params[pi].value();
    std::vector<std::size_t> coords(value.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.samples_per_param && options.samples_per_param < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.samples_per_param);
    }
    double worst = 0.0;
    for (std::size_t c : coords) {
      const double saved = value[c];
      value[c] = saved + options.step;
      const double up = evaluate(f);
      value[c] = saved - options.step;
      const double down = evaluate(f);
      value[c] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[pi][c];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
    report.per_param.push_back(worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

}  // namespace peer
