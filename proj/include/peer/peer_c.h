/* Copyright 2026 The peer-lab Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the peer-lab core. Every handle is opaque and owned by the
 * caller; every fallible call returns a peer_status and, on failure, leaves a
 * message retrievable with peer_last_error() on the calling thread.
 */
#ifndef PEER_PEER_C_H_
#define PEER_PEER_C_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PEER_API __declspec(dllexport)
#else
#define PEER_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum peer_status {
  PEER_OK = 0,
  PEER_ERR_CONFIG = 1,
  PEER_ERR_DIMENSION = 2,
  PEER_ERR_STATE = 3,
  PEER_ERR_NUMERIC = 4,
  PEER_ERR_IO = 5,
  PEER_ERR_ARGUMENT = 6, /* null pointer or undersized output buffer */
  PEER_ERR_INTERNAL = 7
} peer_status;

/* Message of the most recent failure on this thread; "" after success. */
PEER_API const char* peer_last_error(void);
PEER_API const char* peer_status_name(peer_status status);
PEER_API const char* peer_version(void);

typedef struct peer_op_count {
  uint64_t macs;
  uint64_t comparisons;
} peer_op_count;

/* ---- configuration ------------------------------------------------------ */

typedef struct peer_config peer_config;

/* A configuration holding every default. */
PEER_API peer_status peer_config_create(peer_config** out);
/* Parses a flat key=value file; unknown keys fail with PEER_ERR_CONFIG. */
PEER_API peer_status peer_config_load(const char* path, peer_config** out);
PEER_API peer_status peer_config_set(peer_config* config, const char* key, const char* value);
/* Resolved value of `key`, NUL-terminated into buf. *len receives the
 * length without the terminator, also when buf is too small. */
PEER_API peer_status peer_config_get(const peer_config* config, const char* key, char* buf,
                                     size_t cap, size_t* len);
/* Every resolved key=value pair, one per line. */
PEER_API peer_status peer_config_save(const peer_config* config, const char* path);
PEER_API void peer_config_destroy(peer_config* config);

/* ---- product-key index -------------------------------------------------- */

typedef struct peer_index peer_index;

typedef enum peer_retrieval {
  PEER_RETRIEVE_PRODUCT = 0,
  PEER_RETRIEVE_EXHAUSTIVE = 1
} peer_retrieval;

/* N experts (a perfect square) over queries of even length d. */
PEER_API peer_status peer_index_create(uint64_t n_experts, uint64_t d, uint64_t seed,
                                       peer_index** out);
PEER_API uint64_t peer_index_size(const peer_index* index);
PEER_API uint64_t peer_index_dim(const peer_index* index);
/* Top-k by score, ties to the lower expert id. indices and scores hold k
 * entries; counts may be null. */
PEER_API peer_status peer_index_retrieve(const peer_index* index, peer_retrieval method,
                                         const double* query, size_t d, size_t k,
                                         uint64_t* indices, double* scores, peer_op_count* counts);
PEER_API void peer_index_destroy(peer_index* index);

/* ---- accounting --------------------------------------------------------- */

typedef struct peer_layer_cost {
  uint64_t total;
  uint64_t active;
  uint64_t expert;
  double granularity;
  uint64_t router;
  uint64_t buffers;
  uint64_t mac_per_token;
} peer_layer_cost;

typedef struct peer_model_cost {
  uint64_t total;
  uint64_t active;
  uint64_t buffers;
  uint64_t mac_per_token;
  uint64_t mac_per_step; /* forward and backward over train.batch windows */
} peer_model_cost;

/* Cost of the configured middle layer and of the whole model, under the
 * configuration's accounting.bias setting. */
PEER_API peer_status peer_layer_cost_of(const peer_config* config, peer_layer_cost* out);
PEER_API peer_status peer_model_cost_of(const peer_config* config, peer_model_cost* out);

typedef struct peer_scaling_params {
  double a, b, g, gamma, alpha, beta, c;
} peer_scaling_params;

/* c + (g / G^gamma + a) / P^alpha + b / D^beta */
PEER_API peer_status peer_scaling_law(const peer_scaling_params* params, double P, double D,
                                      double G, double* out);

/* ---- usage -------------------------------------------------------------- */

typedef struct peer_usage peer_usage;

PEER_API peer_status peer_usage_create(uint64_t n_experts, peer_usage** out);
PEER_API uint64_t peer_usage_size(const peer_usage* usage);
PEER_API uint64_t peer_usage_tokens(const peer_usage* usage);
PEER_API peer_status peer_usage_add(peer_usage* usage, uint64_t expert, double score);
/* Fraction of experts with non-zero mass and KL(z || uniform) in nats. */
PEER_API peer_status peer_usage_metrics(const peer_usage* usage, double* fraction,
                                        double* unevenness);
/* Normalized z into an array of peer_usage_size() entries. */
PEER_API peer_status peer_usage_distribution(const peer_usage* usage, double* z, size_t n);
PEER_API void peer_usage_destroy(peer_usage* usage);

/* ---- models ------------------------------------------------------------- */

typedef struct peer_model peer_model;

PEER_API peer_status peer_model_create(const peer_config* config, peer_model** out);
/* Loads a checkpoint together with the configuration stored beside it. */
PEER_API peer_status peer_model_load(const char* checkpoint, peer_model** out);
PEER_API uint64_t peer_model_parameter_count(const peer_model* model);
/* A copy of the model's configuration; destroy with peer_config_destroy. */
PEER_API peer_status peer_model_config(const peer_model* model, peer_config** out);
/* exp of the mean next-byte cross-entropy over `data`, teacher forced. */
PEER_API peer_status peer_model_perplexity(peer_model* model, const uint8_t* data, size_t len,
                                           double* ppl);
/* Router scores of the middle layer accumulated over `data`. */
PEER_API peer_status peer_model_usage(peer_model* model, const uint8_t* data, size_t len,
                                      peer_usage** out);
/* Parameters and buffers only. Writes `<path>.cfg` beside it. */
PEER_API peer_status peer_model_save(peer_model* model, const char* path);
PEER_API void peer_model_destroy(peer_model* model);

/* ---- training ----------------------------------------------------------- */

typedef struct peer_trainer peer_trainer;

typedef struct peer_step_metrics {
  uint64_t step;
  double loss;
  double ppl;
  double tokens_per_s;
  uint64_t mac_per_token;
} peer_step_metrics;

/* Builds a fresh model and reads data.path, split by data.val_fraction. */
PEER_API peer_status peer_trainer_create(const peer_config* config, peer_trainer** out);
/* Restores parameters, optimizer moments and step from a checkpoint. */
PEER_API peer_status peer_trainer_resume(peer_trainer* trainer, const char* checkpoint);
PEER_API peer_status peer_trainer_step(peer_trainer* trainer, peer_step_metrics* out);
PEER_API uint64_t peer_trainer_current_step(const peer_trainer* trainer);
PEER_API double peer_trainer_running_loss(const peer_trainer* trainer);
/* Full training checkpoint plus `<path>.cfg`. */
PEER_API peer_status peer_trainer_save(peer_trainer* trainer, const char* path);
PEER_API peer_status peer_trainer_validation_perplexity(peer_trainer* trainer, double* ppl);
/* Borrowed view of the model being trained; valid until the trainer dies. */
PEER_API peer_model* peer_trainer_model(peer_trainer* trainer);
PEER_API peer_status peer_trainer_validation_usage(peer_trainer* trainer, peer_usage** out);
PEER_API void peer_trainer_destroy(peer_trainer* trainer);

/* CSV header for peer_format_metrics rows. */
PEER_API const char* peer_metrics_header(void);
/* Writes one CSV row (no newline) into buf; *len as for peer_config_get. */
PEER_API peer_status peer_format_metrics(const peer_step_metrics* m, char* buf, size_t cap,
                                         size_t* len);

/* ---- sweep and gradient check ------------------------------------------- */

typedef struct peer_sweep_point {
  const char* method;
  uint64_t d_model;
  uint64_t total_params;
  uint64_t active_params;
  uint64_t steps;
  uint64_t steps_trained;
  double val_ppl;
} peer_sweep_point;

typedef void (*peer_sweep_callback)(const peer_sweep_point* point, void* user);

/* Fills `points` (up to cap) with the planned grid without training. */
PEER_API peer_status peer_sweep_plan(const peer_config* config, peer_sweep_point* points,
                                     size_t cap, size_t* count);
/* Trains every grid point and writes isoflop.csv and isoflop_plot.dat. */
PEER_API peer_status peer_sweep_run(const peer_config* config, const char* out_dir,
                                    peer_sweep_callback callback, void* user);

typedef struct peer_grad_group {
  const char* group;
  uint64_t tensors;
  double max_rel_error;
} peer_grad_group;

typedef void (*peer_grad_callback)(const peer_grad_group* group, void* user);

typedef struct peer_grad_summary {
  double max_rel_error;
  uint64_t unretrieved_rows;
  int unretrieved_zero; /* 1 if every unselected expert row has zero gradient */
} peer_grad_summary;

/* Central differences against reverse mode on the configured model over a
 * random batch x time byte batch. */
PEER_API peer_status peer_grad_check(const peer_config* config, size_t batch, size_t time,
                                     uint64_t seed, double step, peer_grad_callback callback,
                                     void* user, peer_grad_summary* out);

#ifdef __cplusplus
}
#endif

#endif /* PEER_PEER_C_H_ */
