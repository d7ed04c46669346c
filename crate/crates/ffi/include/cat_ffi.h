#ifndef CAT_FFI_H
#define CAT_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum CatStatus {
  CAT_STATUS_OK = 0,
  CAT_STATUS_NULL_POINTER = 1,
  CAT_STATUS_INVALID_ARGUMENT = 2,
  CAT_STATUS_CONFIG = 3,
  CAT_STATUS_IO = 4,
  CAT_STATUS_FORMAT = 5,
  CAT_STATUS_DIVERGED = 6,
  CAT_STATUS_NUMERIC = 7,
  CAT_STATUS_PANIC = 8,
} CatStatus;

/**
 * A generated dataset.
 */
typedef struct CatDataset CatDataset;

/**
 * A pretrained base with its feature encoder.
 */
typedef struct CatExperiment CatExperiment;

/**
 * Scores of one evaluated fine-tuning run.
 */
typedef struct CatMetrics {
  double prompt_score;
  double identity_score;
  double kps;
} CatMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Writes the full message length, excluding the NUL,
 * to `needed` when it is non-null. An empty string means no error.
 *
 * # Safety
 * `buf` must point to `len` writable bytes or be null with `len == 0`.
 */
enum CatStatus cat_last_error_message(char *buf, size_t len, size_t *needed);

/**
 * Generates the dataset `kind` ("shapes16" or "gauss2d") for `seed`.
 *
 * # Safety
 * `kind` must be a NUL-terminated string; `out` must be writable.
 */
enum CatStatus cat_dataset_generate(const char *kind, uint64_t seed, struct CatDataset **out);

/**
 * Number of base-class samples and their dimension.
 *
 * # Safety
 * `ds` must come from [`cat_dataset_generate`]; outputs must be writable.
 */
enum CatStatus cat_dataset_shape(const struct CatDataset *ds, size_t *len, size_t *dim);

/**
 * Copies sample `index` into `buf` (`buf_len` must equal the dimension)
 * and its class label into `label`.
 *
 * # Safety
 * `buf` must point to `buf_len` writable doubles; `label` must be writable.
 */
enum CatStatus cat_dataset_sample(const struct CatDataset *ds,
                                  size_t index,
                                  double *buf,
                                  size_t buf_len,
                                  size_t *label);

/**
 * # Safety
 * `ds` must come from [`cat_dataset_generate`] and not be used afterwards.
 */
void cat_dataset_free(struct CatDataset *ds);

/**
 * Cosine similarity of two length-`n` vectors.
 *
 * # Safety
 * `a` and `b` must point to `n` doubles; `out` must be writable.
 */
enum CatStatus cat_cosine_similarity(const double *a, const double *b, size_t n, double *out);

/**
 * Harmonic mean of `n` positive values.
 *
 * # Safety
 * `xs` must point to `n` doubles; `out` must be writable.
 */
enum CatStatus cat_harmonic_mean(const double *xs, size_t n, double *out);

/**
 * Knowledge preservation score over `pairs` row-major feature pairs of
 * width `dim`.
 *
 * # Safety
 * `with_token` and `without_token` must each point to `pairs * dim` doubles.
 */
enum CatStatus cat_kps_features(const double *with_token,
                                const double *without_token,
                                size_t pairs,
                                size_t dim,
                                double *out);

/**
 * Opens an experiment: reads the TOML config at `config_path` (built-in
 * glyph defaults when null), overrides its output directory with
 * `out_dir` when non-null, then loads or pretrains the base and encoder
 * checkpoints there.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum CatStatus cat_experiment_open(const char *config_path,
                                   const char *out_dir,
                                   struct CatExperiment **out);

/**
 * Fine-tunes one adapter in `mode` ("lora", "cat", "prior_preservation"
 * or "textual_embedding") on the configured identity and scores it.
 *
 * # Safety
 * `exp` must come from [`cat_experiment_open`]; `mode` must be
 * NUL-terminated; `out` must be writable.
 */
enum CatStatus cat_experiment_run(const struct CatExperiment *exp,
                                  const char *mode,
                                  double alpha,
                                  uint64_t seed,
                                  size_t steps,
                                  double lr,
                                  struct CatMetrics *out);

/**
 * # Safety
 * `exp` must come from [`cat_experiment_open`] and not be used afterwards.
 */
void cat_experiment_free(struct CatExperiment *exp);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAT_FFI_H */
