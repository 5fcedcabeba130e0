// Copyright 2026 The peer-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peer/peer_c.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <new>
#include <optional>
#include <string>

#include "peer/analysis/accounting.hpp"
#include "peer/analysis/grad_report.hpp"
#include "peer/analysis/sweep.hpp"
#include "peer/analysis/usage.hpp"
#include "peer/core/error.hpp"
#include "peer/lm/trainer.hpp"
#include "peer/retrieval/product_key_index.hpp"

struct peer_config {
  peer::KeyValueConfig raw;  // entries set by the user, defaults implied
  peer::RunConfig run;

  void resolve() { run = peer::RunConfig::from(raw); }
};

struct peer_index {
  peer::ProductKeyIndex index;
};

struct peer_usage {
  peer::UsageAccumulator acc;
};

struct peer_model {
  peer::RunConfig run;
  std::unique_ptr<peer::Model> owned;
  peer::Model* model = nullptr;
};

struct peer_trainer {
  peer::RunConfig run;
  std::unique_ptr<peer::Corpus> corpus;
  std::unique_ptr<peer::Model> model;
  std::unique_ptr<peer::Trainer> trainer;
  peer_model view;
};

namespace {

thread_local std::string g_last_error;

peer_status fail(peer_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <typename F>
peer_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return PEER_OK;
  } catch (const peer::ConfigError& e) {
    return fail(PEER_ERR_CONFIG, e.what());
  } catch (const peer::DimensionError& e) {
    return fail(PEER_ERR_DIMENSION, e.what());
  } catch (const peer::StateError& e) {
    return fail(PEER_ERR_STATE, e.what());
  } catch (const peer::NumericError& e) {
    return fail(PEER_ERR_NUMERIC, e.what());
  } catch (const peer::IoError& e) {
    return fail(PEER_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(PEER_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(PEER_ERR_INTERNAL, e.what());
  }
}

template <typename... Ptrs>
bool any_null(Ptrs... ptrs) {
  return ((ptrs == nullptr) || ...);
}

peer_status null_argument() { return fail(PEER_ERR_ARGUMENT, "null argument"); }

peer_status copy_out(const std::string& s, char* buf, size_t cap, size_t* len) {
  if (len) *len = s.size();
  if (cap < s.size() + 1) {
    return fail(PEER_ERR_ARGUMENT, "buffer of " + std::to_string(cap) + " bytes cannot hold " +
                                       std::to_string(s.size() + 1));
  }
  std::memcpy(buf, s.c_str(), s.size() + 1);
  g_last_error.clear();
  return PEER_OK;
}

std::filesystem::path sidecar(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".cfg";
}

void save_sidecar(const peer::RunConfig& run, const std::filesystem::path& checkpoint) {
  run.to_kv().save(sidecar(checkpoint));
}

void fill_cost(const peer::CostModel& c, peer_layer_cost* out) {
  *out = {c.total, c.active, c.expert, c.granularity, c.router, c.buffers, c.mac_per_token};
}

peer_sweep_point to_c(const peer::SweepPoint& p) {
  return {peer::middle_kind_name(p.method).data(),
          p.d_model,
          p.total_params,
          p.active_params,
          p.steps,
          p.steps_trained,
          p.val_ppl};
}

}  // namespace

extern "C" {

const char* peer_last_error(void) { return g_last_error.c_str(); }

const char* peer_status_name(peer_status status) {
  switch (status) {
    case PEER_OK: return "ok";
    case PEER_ERR_CONFIG: return "config";
    case PEER_ERR_DIMENSION: return "dimension";
    case PEER_ERR_STATE: return "state";
    case PEER_ERR_NUMERIC: return "numeric";
    case PEER_ERR_IO: return "io";
    case PEER_ERR_ARGUMENT: return "argument";
    case PEER_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* peer_version(void) { return "0.1.0"; }

// ---- configuration

peer_status peer_config_create(peer_config** out) {
  if (any_null(out)) return null_argument();
  return guarded([&] {
    auto c = std::make_unique<peer_config>();
    c->resolve();
    *out = c.release();
  });
}

peer_status peer_config_load(const char* path, peer_config** out) {
  if (any_null(path, out)) return null_argument();
  return guarded([&] {
    auto c = std::make_unique<peer_config>();
    c->raw = peer::KeyValueConfig::load(path);
    c->resolve();
    *out = c.release();
  });
}

peer_status peer_config_set(peer_config* config, const char* key, const char* value) {
  if (any_null(config, key, value)) return null_argument();
  return guarded([&] {
    peer::KeyValueConfig next = config->raw;
    next.set(key, value);
    config->run = peer::RunConfig::from(next);
    config->raw = std::move(next);
  });
}

peer_status peer_config_get(const peer_config* config, const char* key, char* buf, size_t cap,
                            size_t* len) {
  if (any_null(config, key, buf)) return null_argument();
  const auto kv = config->run.to_kv();
  auto it = kv.entries().find(key);
  if (it == kv.entries().end()) {
    return fail(PEER_ERR_CONFIG, std::string("unknown config key '") + key + "'");
  }
  return copy_out(it->second, buf, cap, len);
}

peer_status peer_config_save(const peer_config* config, const char* path) {
  if (any_null(config, path)) return null_argument();
  return guarded([&] { config->run.to_kv().save(path); });
}

void peer_config_destroy(peer_config* config) { delete config; }

// ---- index

peer_status peer_index_create(uint64_t n_experts, uint64_t d, uint64_t seed, peer_index** out) {
  if (any_null(out)) return null_argument();
  return guarded([&] {
    *out = new peer_index{peer::ProductKeyIndex::build(n_experts, d, 0.0, seed)};
  });
}

uint64_t peer_index_size(const peer_index* index) { return index ? index->index.n_experts() : 0; }

uint64_t peer_index_dim(const peer_index* index) { return index ? index->index.key_dim() : 0; }

peer_status peer_index_retrieve(const peer_index* index, peer_retrieval method,
                                const double* query, size_t d, size_t k, uint64_t* indices,
                                double* scores, peer_op_count* counts) {
  if (any_null(index, query, indices, scores)) return null_argument();
  return guarded([&] {
    peer::OpCounter counter;
    const std::span<const double> q(query, d);
    peer::RetrievalResult r;
    if (method == PEER_RETRIEVE_PRODUCT) {
      r = index->index.retrieve_topk(q, k, &counter);
    } else if (method == PEER_RETRIEVE_EXHAUSTIVE) {
      r = index->index.retrieve_exhaustive(q, k, &counter);
    } else {
      throw peer::ConfigError("unknown retrieval method " + std::to_string(method));
    }
    std::copy(r.indices.begin(), r.indices.end(), indices);
    std::copy(r.scores.begin(), r.scores.end(), scores);
    if (counts) *counts = {counter.macs, counter.comparisons};
  });
}

void peer_index_destroy(peer_index* index) { delete index; }

// ---- accounting

peer_status peer_layer_cost_of(const peer_config* config, peer_layer_cost* out) {
  if (any_null(config, out)) return null_argument();
  return guarded([&] {
    fill_cost(peer::middle_layer_cost(config->run.model, config->run.bias_accounting), out);
  });
}

peer_status peer_model_cost_of(const peer_config* config, peer_model_cost* out) {
  if (any_null(config, out)) return null_argument();
  return guarded([&] {
    const auto& run = config->run;
    run.model.validate();
    const auto c = peer::model_cost(run.model, run.bias_accounting);
    *out = {c.total, c.active, c.buffers, c.mac_per_token,
            peer::mac_per_step(run.model, run.train.batch)};
  });
}

peer_status peer_scaling_law(const peer_scaling_params* params, double P, double D, double G,
                             double* out) {
  if (any_null(params, out)) return null_argument();
  return guarded([&] {
    const peer::ScalingLawParams p{params->a,     params->b,    params->g, params->gamma,
                                   params->alpha, params->beta, params->c};
    *out = peer::evaluate_scaling_law(p, P, D, G);
  });
}

// ---- usage

peer_status peer_usage_create(uint64_t n_experts, peer_usage** out) {
  if (any_null(out)) return null_argument();
  if (n_experts == 0) return fail(PEER_ERR_CONFIG, "usage accumulator needs at least one expert");
  return guarded([&] { *out = new peer_usage{peer::UsageAccumulator(n_experts)}; });
}

uint64_t peer_usage_size(const peer_usage* usage) { return usage ? usage->acc.n_experts() : 0; }

uint64_t peer_usage_tokens(const peer_usage* usage) { return usage ? usage->acc.token_count : 0; }

peer_status peer_usage_add(peer_usage* usage, uint64_t expert, double score) {
  if (any_null(usage)) return null_argument();
  if (expert >= usage->acc.n_experts()) {
    return fail(PEER_ERR_DIMENSION, "expert id " + std::to_string(expert) + " out of range");
  }
  if (!(score >= 0.0) || !std::isfinite(score)) {
    return fail(PEER_ERR_NUMERIC, "router score must be finite and non-negative");
  }
  usage->acc.z_prime[expert] += score;
  g_last_error.clear();
  return PEER_OK;
}

peer_status peer_usage_metrics(const peer_usage* usage, double* fraction, double* unevenness) {
  if (any_null(usage, fraction, unevenness)) return null_argument();
  return guarded([&] {
    const auto m = peer::expert_usage_metrics(usage->acc);
    *fraction = m.usage;
    *unevenness = m.unevenness;
  });
}

peer_status peer_usage_distribution(const peer_usage* usage, double* z, size_t n) {
  if (any_null(usage, z)) return null_argument();
  if (n < usage->acc.n_experts()) return fail(PEER_ERR_ARGUMENT, "output array too small");
  return guarded([&] {
    double total = 0.0;
    for (double v : usage->acc.z_prime) total += v;
    if (!(total > 0.0)) throw peer::NumericError("usage accumulator is all zero");
    for (size_t i = 0; i < usage->acc.n_experts(); ++i) z[i] = usage->acc.z_prime[i] / total;
  });
}

void peer_usage_destroy(peer_usage* usage) { delete usage; }

// ---- models

peer_status peer_model_create(const peer_config* config, peer_model** out) {
  if (any_null(config, out)) return null_argument();
  return guarded([&] {
    auto m = std::make_unique<peer_model>();
    m->run = config->run;
    m->owned = std::make_unique<peer::Model>(m->run.model);
    m->model = m->owned.get();
    *out = m.release();
  });
}

peer_status peer_model_load(const char* checkpoint, peer_model** out) {
  if (any_null(checkpoint, out)) return null_argument();
  return guarded([&] {
    auto m = std::make_unique<peer_model>();
    m->run = peer::RunConfig::load(sidecar(checkpoint));
    m->owned = std::make_unique<peer::Model>(m->run.model);
    m->model = m->owned.get();
    peer::load_model_entries(*m->model, peer::read_checkpoint(checkpoint));
    *out = m.release();
  });
}

uint64_t peer_model_parameter_count(const peer_model* model) {
  return model ? model->model->parameter_count() : 0;
}

peer_status peer_model_config(const peer_model* model, peer_config** out) {
  if (any_null(model, out)) return null_argument();
  return guarded([&] {
    auto c = std::make_unique<peer_config>();
    c->raw = model->run.to_kv();
    c->resolve();
    *out = c.release();
  });
}

peer_status peer_model_perplexity(peer_model* model, const uint8_t* data, size_t len,
                                  double* ppl) {
  if (any_null(model, ppl) || (len && !data)) return null_argument();
  return guarded([&] { *ppl = peer::evaluate_perplexity(*model->model, {data, len}); });
}

peer_status peer_model_usage(peer_model* model, const uint8_t* data, size_t len,
                             peer_usage** out) {
  if (any_null(model, out) || (len && !data)) return null_argument();
  return guarded([&] {
    const auto& mc = model->run.model;
    const std::uint64_t n =
        mc.middle == peer::MiddleKind::kPkm ? mc.pkm.n_memories : mc.peer.n_experts;
    auto u = std::make_unique<peer_usage>(peer_usage{peer::UsageAccumulator(n)});
    peer::collect_usage(*model->model, {data, len}, u->acc);
    *out = u.release();
  });
}

peer_status peer_model_save(peer_model* model, const char* path) {
  if (any_null(model, path)) return null_argument();
  return guarded([&] {
    peer::write_checkpoint(path, peer::model_entries(*model->model));
    save_sidecar(model->run, path);
  });
}

void peer_model_destroy(peer_model* model) { delete model; }

// ---- training

peer_status peer_trainer_create(const peer_config* config, peer_trainer** out) {
  if (any_null(config, out)) return null_argument();
  return guarded([&] {
    auto t = std::make_unique<peer_trainer>();
    t->run = config->run;
    if (t->run.data.path.empty()) throw peer::ConfigError("data.path is not set");
    t->corpus = std::make_unique<peer::Corpus>(
        peer::Corpus::load(t->run.data.path, t->run.data.val_fraction));
    t->model = std::make_unique<peer::Model>(t->run.model);
    t->trainer = std::make_unique<peer::Trainer>(*t->model, *t->corpus, t->run.train);
    t->view.run = t->run;
    t->view.model = t->model.get();
    *out = t.release();
  });
}

peer_status peer_trainer_resume(peer_trainer* trainer, const char* checkpoint) {
  if (any_null(trainer, checkpoint)) return null_argument();
  return guarded([&] { trainer->trainer->load_checkpoint(checkpoint); });
}

peer_status peer_trainer_step(peer_trainer* trainer, peer_step_metrics* out) {
  if (any_null(trainer)) return null_argument();
  return guarded([&] {
    const auto m = trainer->trainer->step();
    if (out) *out = {m.step, m.loss, m.ppl, m.tokens_per_s, m.mac_per_token};
  });
}

uint64_t peer_trainer_current_step(const peer_trainer* trainer) {
  return trainer ? trainer->trainer->state().step : 0;
}

double peer_trainer_running_loss(const peer_trainer* trainer) {
  return trainer ? trainer->trainer->state().running_loss : 0.0;
}

peer_status peer_trainer_save(peer_trainer* trainer, const char* path) {
  if (any_null(trainer, path)) return null_argument();
  return guarded([&] {
    trainer->trainer->save_checkpoint(path);
    save_sidecar(trainer->run, path);
  });
}

peer_status peer_trainer_validation_perplexity(peer_trainer* trainer, double* ppl) {
  if (any_null(trainer, ppl)) return null_argument();
  return guarded(
      [&] { *ppl = peer::evaluate_perplexity(*trainer->model, trainer->corpus->validation()); });
}

peer_model* peer_trainer_model(peer_trainer* trainer) {
  return trainer ? &trainer->view : nullptr;
}

peer_status peer_trainer_validation_usage(peer_trainer* trainer, peer_usage** out) {
  if (any_null(trainer, out)) return null_argument();
  const auto v = trainer->corpus->validation();
  return peer_model_usage(&trainer->view, v.data(), v.size(), out);
}

void peer_trainer_destroy(peer_trainer* trainer) { delete trainer; }

const char* peer_metrics_header(void) { return peer::kMetricsHeader; }

peer_status peer_format_metrics(const peer_step_metrics* m, char* buf, size_t cap, size_t* len) {
  if (any_null(m, buf)) return null_argument();
  const peer::StepMetrics s{m->step, m->loss, m->ppl, m->tokens_per_s, m->mac_per_token};
  return copy_out(peer::metrics_row(s), buf, cap, len);
}

// ---- sweep and gradient check

peer_status peer_sweep_plan(const peer_config* config, peer_sweep_point* points, size_t cap,
                            size_t* count) {
  if (any_null(config, count) || (cap && !points)) return null_argument();
  std::optional<peer::SweepPlan> plan;
  const peer_status st = guarded([&] { plan = peer::plan_isoflop_sweep(config->run); });
  if (st != PEER_OK) return st;
  *count = plan->points.size();
  if (cap < plan->points.size()) return fail(PEER_ERR_ARGUMENT, "point array too small");
  for (size_t i = 0; i < plan->points.size(); ++i) points[i] = to_c(plan->points[i]);
  return PEER_OK;
}

peer_status peer_sweep_run(const peer_config* config, const char* out_dir,
                           peer_sweep_callback callback, void* user) {
  if (any_null(config, out_dir)) return null_argument();
  return guarded([&] {
    const auto& run = config->run;
    if (run.data.path.empty()) throw peer::ConfigError("data.path is not set");
    const auto corpus = peer::Corpus::load(run.data.path, run.data.val_fraction);
    peer::isoflop_sweep(run, corpus, out_dir, [&](const peer::SweepPoint& p) {
      if (callback) {
        const peer_sweep_point c = to_c(p);
        callback(&c, user);
      }
    });
  });
}

peer_status peer_grad_check(const peer_config* config, size_t batch, size_t time, uint64_t seed,
                            double step, peer_grad_callback callback, void* user,
                            peer_grad_summary* out) {
  if (any_null(config, out)) return null_argument();
  return guarded([&] {
    peer::GradCheckOptions opts;
    opts.step = step;
    opts.seed = seed;
    const auto report = peer::model_grad_check(config->run.model, batch, time, seed, opts);
    for (const auto& g : report.groups) {
      if (callback) {
        const peer_grad_group c{g.group.c_str(), g.tensors, g.max_rel_error};
        callback(&c, user);
      }
    }
    *out = {report.max_rel_error, report.unretrieved_rows, report.unretrieved_zero ? 1 : 0};
  });
}

}  // extern "C"
