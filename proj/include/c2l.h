#ifndef C2L_H
#define C2L_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define C2L_API __attribute__((visibility("default")))
#else
#define C2L_API
#endif

typedef enum c2l_status {
  C2L_OK = 0,
  C2L_ERR_CONFIG = 1,            /* invalid configuration or usage */
  C2L_ERR_DIMENSION = 2,         /* shape or length mismatch */
  C2L_ERR_CONTRACT = 3,          /* precondition violated */
  C2L_ERR_INTEGRITY = 4,         /* freeze, partition, hash or leakage guard violated */
  C2L_ERR_MISSING_ARTIFACT = 5,  /* expected upstream file not found */
  C2L_ERR_NUMERIC = 6,           /* NaN or Inf */
  C2L_ERR_IO = 7,
  C2L_ERR_INTERNAL = 8,
  C2L_ERR_NULL_ARGUMENT = 9
} c2l_status;

typedef struct c2l_context c2l_context;
typedef struct c2l_dataset c2l_dataset;
typedef struct c2l_model c2l_model;

typedef void (*c2l_log_fn)(const char* line, void* user);

C2L_API const char* c2l_version(void);
C2L_API const char* c2l_status_name(c2l_status status);

/* A context carries the last error message, the last JSON result and an
   optional log sink. Contexts are not thread safe; use one per thread. */
C2L_API c2l_status c2l_context_create(c2l_context** out);
C2L_API void c2l_context_destroy(c2l_context* ctx);
C2L_API void c2l_context_set_log(c2l_context* ctx, c2l_log_fn fn, void* user);
C2L_API const char* c2l_last_error(const c2l_context* ctx);
/* JSON text produced by the last successful call that returns a document. */
C2L_API const char* c2l_result(const c2l_context* ctx);

/* Pipeline commands: toydata, pretrain, distribute, adapt, generate,
   cotrain, evaluate. c2l_commands puts a JSON array of names in the result,
   c2l_default_config the command's default config object, and c2l_run the
   run manifest. config_json is merged over the defaults. */
C2L_API c2l_status c2l_commands(c2l_context* ctx);
C2L_API c2l_status c2l_default_config(c2l_context* ctx, const char* command);
C2L_API c2l_status c2l_run(c2l_context* ctx, const char* command, const char* config_json);
/* Directory that relative paths resolve against. */
C2L_API c2l_status c2l_output_root(c2l_context* ctx);

/* Datasets (<stem>.json, <stem>.bin, <stem>.index.csv). */
C2L_API c2l_status c2l_dataset_open(c2l_context* ctx, const char* stem, c2l_dataset** out);
C2L_API void c2l_dataset_close(c2l_dataset* ds);
C2L_API size_t c2l_dataset_size(const c2l_dataset* ds);
C2L_API size_t c2l_dataset_gene_dim(const c2l_dataset* ds);
C2L_API size_t c2l_dataset_patch_numel(const c2l_dataset* ds);
/* Header summary (slide id, shape, gene names, preprocessing) as JSON. */
C2L_API c2l_status c2l_dataset_info(c2l_context* ctx, const c2l_dataset* ds);
/* Copies record i; either output may be NULL. */
C2L_API c2l_status c2l_dataset_record(c2l_context* ctx, const c2l_dataset* ds, size_t i, float* patch,
                                      float* genes);

/* Checkpoints. use_ema selects the EMA weights. */
C2L_API c2l_status c2l_model_open(c2l_context* ctx, const char* checkpoint_dir, int use_ema, c2l_model** out);
C2L_API void c2l_model_close(c2l_model* model);
C2L_API int c2l_model_is_adapted(const c2l_model* model);
C2L_API size_t c2l_model_gene_dim(const c2l_model* model);
C2L_API size_t c2l_model_patch_numel(const c2l_model* model);
/* Samples n patches into out (n * patch_numel floats). sampler_json is a
   sampler config (method, ddim_steps, eta, guidance_scale, seed); genes is
   n * gene_dim floats, or NULL for unconditional samples. */
C2L_API c2l_status c2l_model_sample(c2l_context* ctx, const c2l_model* model, const char* sampler_json,
                                    const float* genes, size_t n, float* out);

#ifdef __cplusplus
}
#endif

#endif
