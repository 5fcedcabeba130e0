// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/core/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "peer/core/error.hpp"
#include "peer/core/op_counter.hpp"

namespace peer {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

MapMat as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MapMat(t.data().data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

CMapMat as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapMat(t.data().data(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void accumulate(const Var& target, const Tensor& delta) {
  Tensor& g = target.grad();
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += delta[i];
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename Fwd, typename Deriv>
Var unary(Tape& tape, const Var& a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = fwd(x[i]);
  const bool track = tape.needs_grad({&a});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([a, y, deriv]() mutable {
      if (!y.has_grad() || !a.requires_grad()) return;
      const Tensor& x = a.value();
      const Tensor& gy = y.grad();
      Tensor& ga = a.grad();
      for (std::size_t i = 0; i < x.numel(); ++i) ga[i] += gy[i] * deriv(x[i], y.value()[i]);
    });
  }
  return y;
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected relu|gelu)");
}

std::string_view activation_name(Activation act) {
  return act == Activation::kRelu ? "relu" : "gelu";
}

double activate(Activation act, double x) {
  if (act == Activation::kRelu) return x > 0.0 ? x : 0.0;
  return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

double activate_grad(Activation act, double x) {
  if (act == Activation::kRelu) return x > 0.0 ? 1.0 : 0.0;
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

double dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

std::vector<std::size_t> topk(std::span<const double> values, std::size_t k,
                              OpCounter* counter) {
  if (k > values.size()) {
    throw DimensionError("top-k with k=" + std::to_string(k) + " over " +
                         std::to_string(values.size()) + " values");
  }
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::uint64_t comparisons = 0;
  auto before = [&](std::size_t a, std::size_t b) {
    ++comparisons;
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    before);
  idx.resize(k);
  if (counter) counter->comparisons += comparisons;
  return idx;
}

Var matmul(Tape& tape, const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 2 || av.rank() < 1 || av.cols() != bv.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(av.shape()) +
                         " x " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), p = av.cols(), n = bv.dim(1);
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  as_mat(out, m, n).noalias() = as_mat(av, m, p) * as_mat(bv, p, n);
  const bool track = tape.needs_grad({&a, &b});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([a, b, y, m, p, n]() mutable {
      if (!y.has_grad()) return;
      auto g = as_mat(y.grad(), m, n);
      if (a.requires_grad()) as_mat(a.grad(), m, p).noalias() += g * as_mat(b.value(), p, n).transpose();
      if (b.requires_grad()) as_mat(b.grad(), p, n).noalias() += as_mat(a.value(), m, p).transpose() * g;
    });
  }
  return y;
}

Var add(Tape& tape, const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  const bool track = tape.needs_grad({&a, &b});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([a, b, y]() mutable {
      if (!y.has_grad()) return;
      if (a.requires_grad()) accumulate(a, y.grad());
      if (b.requires_grad()) accumulate(b, y.grad());
    });
  }
  return y;
}

Var mul(Tape& tape, const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  const bool track = tape.needs_grad({&a, &b});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([a, b, y]() mutable {
      if (!y.has_grad()) return;
      const Tensor& g = y.grad();
      if (a.requires_grad()) {
        Tensor& ga = a.grad();
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * b.value()[i];
      }
      if (b.requires_grad()) {
        Tensor& gb = b.grad();
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * a.value()[i];
      }
    });
  }
  return y;
}

Var scale(Tape& tape, const Var& a, double factor) {
  return unary(
      tape, a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var relu(Tape& tape, const Var& a) { return activation(tape, a, Activation::kRelu); }
Var gelu(Tape& tape, const Var& a) { return activation(tape, a, Activation::kGelu); }

Var activation(Tape& tape, const Var& a, Activation act) {
  return unary(
      tape, a, [act](double x) { return activate(act, x); },
      [act](double x, double) { return activate_grad(act, x); });
}

Var sigmoid(Tape& tape, const Var& a) {
  return unary(
      tape, a,
      [](double x) {
        // Split by sign so exp() never overflows.
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double s) { return s * (1.0 - s); });
}

Var softmax(Tape& tape, const Var& a) {
  const Tensor& x = a.value();
  const std::size_t n = x.cols();
  if (x.rank() == 0 || n == 0) throw DimensionError("softmax over an empty axis");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  const bool track = tape.needs_grad({&a});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([a, y, n]() mutable {
      if (!y.has_grad() || !a.requires_grad()) return;
      const Tensor& s = y.value();
      const Tensor& g = y.grad();
      Tensor& ga = a.grad();
      for (std::size_t r = 0; r < s.rows(); ++r) {
        double inner = 0.0;
        for (std::size_t j = 0; j < n; ++j) inner += s.at(r, j) * g.at(r, j);
        for (std::size_t j = 0; j < n; ++j) ga.at(r, j) += s.at(r, j) * (g.at(r, j) - inner);
      }
    });
  }
  return y;
}

Var reshape(Tape& tape, const Var& a, Shape shape) {
  const bool track = tape.needs_grad({&a});
  Var y = Tape::output(a.value().reshaped(std::move(shape)), track);
  if (track) {
    tape.record([a, y]() mutable {
      if (y.has_grad() && a.requires_grad()) accumulate(a, y.grad());
    });
  }
  return y;
}

Var sum(Tape& tape, const Var& a) {
  return weighted_sum(tape, a, Tensor(a.shape(), 1.0));
}

Var weighted_sum(Tape& tape, const Var& a, const Tensor& weights) {
  if (weights.shape() != a.shape()) {
    throw DimensionError("weighted_sum: weights " + shape_str(weights.shape()) +
                         " vs input " + shape_str(a.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < weights.numel(); ++i) total += a.value()[i] * weights[i];
  const bool track = tape.needs_grad({&a});
  Var y = Tape::output(Tensor({1}, total), track);
  if (track) {
    tape.record([a, y, weights]() mutable {
      if (!y.has_grad() || !a.requires_grad()) return;
      const double g = y.grad()[0];
      Tensor& ga = a.grad();
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g * weights[i];
    });
  }
  return y;
}

Var concat_cols(Tape& tape, std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != rows) {
      throw DimensionError("concat_cols: row count mismatch " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    }
    total += p.value().cols();
  }
  Tensor out({rows, total});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t c = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      auto src = p.value().row(r);
      std::copy(src.begin(), src.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    }
    offset += c;
  }
  const bool track = tape.needs_grad(parts);
  Var y = Tape::output(std::move(out), track);
  if (track) {
    std::vector<Var> inputs(parts.begin(), parts.end());
    tape.record([inputs, y, rows]() mutable {
      if (!y.has_grad()) return;
      const Tensor& g = y.grad();
      std::size_t offset = 0;
      for (Var& p : inputs) {
        const std::size_t c = p.value().cols();
        if (p.requires_grad()) {
          Tensor& gp = p.grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) gp.at(r, j) += g.at(r, offset + j);
          }
        }
        offset += c;
      }
    });
  }
  return y;
}

Var gather_rows(Tape& tape, const Var& table, std::span<const std::size_t> index) {
  const Tensor& t = table.value();
  const std::size_t cols = t.cols();
  Tensor out({index.size(), cols});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= t.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(index[r]) +
                           " out of range for " + shape_str(t.shape()));
    }
    auto src = t.row(index[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  const bool track = tape.needs_grad({&table});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record([table, y, idx = std::move(idx), cols]() mutable {
      if (!y.has_grad()) return;
      const Tensor& g = y.grad();
      Tensor& gt = table.grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t j = 0; j < cols; ++j) gt.at(idx[r], j) += g.at(r, j);
      }
    });
  }
  return y;
}

Var scatter_add_rows(Tape& tape, const Var& src, std::span<const std::size_t> index,
                     std::size_t n_rows) {
  const Tensor& s = src.value();
  if (s.rows() != index.size()) {
    throw DimensionError("scatter_add_rows: " + std::to_string(index.size()) +
                         " indices for source " + shape_str(s.shape()));
  }
  const std::size_t cols = s.cols();
  Tensor out({n_rows, cols});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n_rows) {
      throw DimensionError("scatter_add_rows: index " + std::to_string(index[r]) +
                           " out of range for " + std::to_string(n_rows) + " rows");
    }
    for (std::size_t j = 0; j < cols; ++j) out.at(index[r], j) += s.at(r, j);
  }
  const bool track = tape.needs_grad({&src});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record([src, y, idx = std::move(idx), cols]() mutable {
      if (!y.has_grad()) return;
      const Tensor& g = y.grad();
      Tensor& gs = src.grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t j = 0; j < cols; ++j) gs.at(r, j) += g.at(idx[r], j);
      }
    });
  }
  return y;
}

Var gather_elements(Tape& tape, const Var& a, std::span<const std::size_t> flat_index) {
  Tensor out({flat_index.size()});
  for (std::size_t r = 0; r < flat_index.size(); ++r) {
    if (flat_index[r] >= a.value().numel()) {
      throw DimensionError("gather_elements: index out of range for " + shape_str(a.shape()));
    }
    out[r] = a.value()[flat_index[r]];
  }
  const bool track = tape.needs_grad({&a});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    std::vector<std::size_t> idx(flat_index.begin(), flat_index.end());
    tape.record([a, y, idx = std::move(idx)]() mutable {
      if (!y.has_grad()) return;
      const Tensor& g = y.grad();
      Tensor& ga = a.grad();
      for (std::size_t r = 0; r < idx.size(); ++r) ga[idx[r]] += g[r];
    });
  }
  return y;
}

Var scale_rows(Tape& tape, const Var& x, const Var& s) {
  const Tensor& xv = x.value();
  if (s.value().numel() != xv.rows()) {
    throw DimensionError("scale_rows: " + shape_str(s.shape()) + " factors for " +
                         shape_str(xv.shape()));
  }
  const std::size_t cols = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t j = 0; j < cols; ++j) out.at(r, j) = xv.at(r, j) * s.value()[r];
  }
  const bool track = tape.needs_grad({&x, &s});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([x, s, y, cols]() mutable {
      if (!y.has_grad()) return;
      const Tensor& g = y.grad();
      const Tensor& xv = x.value();
      for (std::size_t r = 0; r < xv.rows(); ++r) {
        if (x.requires_grad()) {
          for (std::size_t j = 0; j < cols; ++j) x.grad().at(r, j) += g.at(r, j) * s.value()[r];
        }
        if (s.requires_grad()) s.grad()[r] += dot(g.row(r), xv.row(r));
      }
    });
  }
  return y;
}

Var layer_norm(Tape& tape, const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (gain.value().numel() != n || bias.value().numel() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + " for input " +
                         shape_str(xv.shape()));
  }
  const std::size_t rows = xv.rows();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat.at(r, j) = (in[j] - mean) * inv_std[r];
      out.at(r, j) = xhat.at(r, j) * gain.value()[j] + bias.value()[j];
    }
  }
  const bool track = tape.needs_grad({&x, &gain, &bias});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([x, gain, bias, y, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
                 rows]() mutable {
      if (!y.has_grad()) return;
      const Tensor& g = y.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double dxhat = g.at(r, j) * gain.value()[j];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xhat.at(r, j);
          if (gain.requires_grad()) gain.grad()[j] += g.at(r, j) * xhat.at(r, j);
          if (bias.requires_grad()) bias.grad()[j] += g.at(r, j);
        }
        if (!x.requires_grad()) continue;
        mean_dxhat /= static_cast<double>(n);
        mean_dxhat_xhat /= static_cast<double>(n);
        Tensor& gx = x.grad();
        for (std::size_t j = 0; j < n; ++j) {
          const double dxhat = g.at(r, j) * gain.value()[j];
          gx.at(r, j) += inv_std[r] * (dxhat - mean_dxhat - xhat.at(r, j) * mean_dxhat_xhat);
        }
      }
    });
  }
  return y;
}

BatchNormState::BatchNormState(std::size_t features, double momentum, double eps)
    : running_mean({features}, 0.0), running_var({features}, 1.0), momentum(momentum),
      eps(eps) {}

Var batch_norm(Tape& tape, const Var& x, const Var& scale, const Var& shift,
               BatchNormState& state, Mode mode) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  const std::size_t batch = xv.rows();
  if (scale.value().numel() != d || shift.value().numel() != d ||
      state.running_mean.numel() != d) {
    throw DimensionError("batch_norm: parameters sized for " +
                         std::to_string(state.running_mean.numel()) + " features, input is " +
                         shape_str(xv.shape()));
  }
  Tensor out(xv.shape());
  if (mode == Mode::kInfer) {
    for (std::size_t r = 0; r < batch; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        const double xh = (xv.at(r, j) - state.running_mean[j]) /
                          std::sqrt(state.running_var[j] + state.eps);
        out.at(r, j) = xh * scale.value()[j] + shift.value()[j];
      }
    }
    // Running statistics are constants here; gradients still reach scale/shift/x.
    const bool track = tape.needs_grad({&x, &scale, &shift});
    Var y = Tape::output(std::move(out), track);
    if (track) {
      Tensor mean = state.running_mean;
      Tensor var = state.running_var;
      const double eps = state.eps;
      tape.record([x, scale, shift, y, mean, var, eps, d, batch]() mutable {
        if (!y.has_grad()) return;
        const Tensor& g = y.grad();
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t j = 0; j < d; ++j) {
            const double inv = 1.0 / std::sqrt(var[j] + eps);
            const double xh = (x.value().at(r, j) - mean[j]) * inv;
            if (scale.requires_grad()) scale.grad()[j] += g.at(r, j) * xh;
            if (shift.requires_grad()) shift.grad()[j] += g.at(r, j);
            if (x.requires_grad()) x.grad().at(r, j) += g.at(r, j) * scale.value()[j] * inv;
          }
        }
      });
    }
    return y;
  }

  if (batch < 2) {
    throw StateError("batch_norm: train mode needs at least 2 rows, got " +
                     std::to_string(batch));
  }
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(d);
  const double nb = static_cast<double>(batch);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < batch; ++r) mean += xv.at(r, j);
    mean /= nb;
    double var = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
      const double c = xv.at(r, j) - mean;
      var += c * c;
    }
    var /= nb;
    inv_std[j] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t r = 0; r < batch; ++r) {
      xhat.at(r, j) = (xv.at(r, j) - mean) * inv_std[j];
      out.at(r, j) = xhat.at(r, j) * scale.value()[j] + shift.value()[j];
    }
    state.running_mean[j] = state.momentum * state.running_mean[j] + (1.0 - state.momentum) * mean;
    state.running_var[j] = state.momentum * state.running_var[j] +
                           (1.0 - state.momentum) * var * nb / (nb - 1.0);
  }
  const bool track = tape.needs_grad({&x, &scale, &shift});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([x, scale, shift, y, xhat = std::move(xhat), inv_std = std::move(inv_std), d,
                 batch, nb]() mutable {
      if (!y.has_grad()) return;
      const Tensor& g = y.grad();
      for (std::size_t j = 0; j < d; ++j) {
        double sum_g = 0.0, sum_g_xhat = 0.0;
        for (std::size_t r = 0; r < batch; ++r) {
          sum_g += g.at(r, j);
          sum_g_xhat += g.at(r, j) * xhat.at(r, j);
        }
        if (scale.requires_grad()) scale.grad()[j] += sum_g_xhat;
        if (shift.requires_grad()) shift.grad()[j] += sum_g;
        if (!x.requires_grad()) continue;
        const double k = scale.value()[j] * inv_std[j] / nb;
        Tensor& gx = x.grad();
        for (std::size_t r = 0; r < batch; ++r) {
          gx.at(r, j) += k * (nb * g.at(r, j) - sum_g - xhat.at(r, j) * sum_g_xhat);
        }
      }
    });
  }
  return y;
}

Var cross_entropy(Tape& tape, const Var& logits, std::span<const std::uint32_t> targets) {
  const Tensor& z = logits.value();
  const std::size_t rows = z.rows(), vocab = z.cols();
  if (targets.size() != rows || rows == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(z.shape()));
  }
  Tensor probs(z.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= vocab) throw DimensionError("cross_entropy: target out of range");
    auto in = z.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) denom += (probs.at(r, j) = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < vocab; ++j) probs.at(r, j) /= denom;
    total += std::log(denom) + mx - in[targets[r]];
  }
  const bool track = tape.needs_grad({&logits});
  Var y = Tape::output(Tensor({1}, total / static_cast<double>(rows)), track);
  if (track) {
    std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
    tape.record([logits, y, probs = std::move(probs), tgt = std::move(tgt), rows,
                 vocab]() mutable {
      if (!y.has_grad()) return;
      const double g = y.grad()[0] / static_cast<double>(rows);
      Tensor& gz = logits.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < vocab; ++j) gz.at(r, j) += g * probs.at(r, j);
        gz.at(r, tgt[r]) -= g;
      }
    });
  }
  return y;
}

Var causal_attention(Tape& tape, const Var& qkv, std::size_t batch, std::size_t time,
                     std::size_t heads) {
  const Tensor& in = qkv.value();
  if (in.rows() != batch * time || in.cols() % 3 != 0 || heads == 0 ||
      (in.cols() / 3) % heads != 0) {
    throw DimensionError("causal_attention: packed input " + shape_str(in.shape()) +
                         " incompatible with batch=" + std::to_string(batch) + " time=" +
                         std::to_string(time) + " heads=" + std::to_string(heads));
  }
  const std::size_t d = in.cols() / 3;
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto T = static_cast<Eigen::Index>(time);
  const auto DH = static_cast<Eigen::Index>(dh);
  const auto stride = static_cast<Eigen::Index>(3 * d);

  using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  auto block = [&](const Tensor& t, std::size_t b, std::size_t part, std::size_t h) {
    const double* base = t.data().data() + b * time * 3 * d + part * d + h * dh;
    return Strided(base, T, DH, Eigen::OuterStride<>(stride));
  };

  Tensor out({batch * time, d});
  // Attention probabilities per (batch, head), kept for the adjoint.
  std::vector<RowMat> probs(batch * heads);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      RowMat s = (block(in, b, 0, h) * block(in, b, 1, h).transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < T; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double denom = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) denom += (s(i, j) = std::exp(s(i, j) - mx));
        for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= denom;
        for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = 0.0;
      }
      StridedMut o(out.data().data() + b * time * d + h * dh, T, DH,
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
      o.noalias() = s * block(in, b, 2, h);
      probs[b * heads + h] = std::move(s);
    }
  }

  const bool track = tape.needs_grad({&qkv});
  Var y = Tape::output(std::move(out), track);
  if (track) {
    tape.record([qkv, y, probs = std::move(probs), batch, time, heads, d, dh, inv_sqrt, T, DH,
                 stride]() mutable {
      if (!y.has_grad() || !qkv.requires_grad()) return;
      const Tensor& in = qkv.value();
      auto block = [&](std::size_t b, std::size_t part, std::size_t h) {
        const double* base = in.data().data() + b * time * 3 * d + part * d + h * dh;
        return Strided(base, T, DH, Eigen::OuterStride<>(stride));
      };
      const Tensor& gy = y.grad();
      Tensor& gin = qkv.grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const RowMat& p = probs[b * heads + h];
          Strided go(gy.data().data() + b * time * d + h * dh, T, DH,
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
          auto grad_block = [&](std::size_t part) {
            return StridedMut(gin.data().data() + b * time * 3 * d + part * d + h * dh, T, DH,
                              Eigen::OuterStride<>(stride));
          };
          RowMat dp = go * block(b, 2, h).transpose();
          grad_block(2).noalias() += p.transpose() * go;
          // Softmax adjoint row by row; masked entries have p = 0.
          for (Eigen::Index i = 0; i < T; ++i) {
            const double inner = p.row(i).dot(dp.row(i));
            dp.row(i) = (p.row(i).array() * (dp.row(i).array() - inner)).matrix();
          }
          dp *= inv_sqrt;
          grad_block(0).noalias() += dp * block(b, 1, h);
          grad_block(1).noalias() += dp.transpose() * block(b, 0, h);
        }
      }
    });
  }
  return y;
}

}  // namespace peer
