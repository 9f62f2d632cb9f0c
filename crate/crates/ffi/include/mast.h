#ifndef MAST_FFI_H
#define MAST_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum MastStatus {
  MAST_STATUS_OK = 0,
  MAST_STATUS_NULL_ARGUMENT = 1,
  MAST_STATUS_INVALID_UTF8 = 2,
  MAST_STATUS_CONFIG = 3,
  MAST_STATUS_IO = 4,
  MAST_STATUS_FORMAT = 5,
  MAST_STATUS_DIMENSION = 6,
  MAST_STATUS_DOMAIN = 7,
  MAST_STATUS_CONTRACT = 8,
  MAST_STATUS_NUMERIC = 9,
  MAST_STATUS_BUFFER_TOO_SMALL = 10,
  MAST_STATUS_PANIC = 11,
} MastStatus;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct MastModel MastModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mast_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * plus one, so a zero-length probe tells the caller how much to allocate.
 *
 * # Safety
 * `buf` must point to `len` writable bytes or be null with `len == 0`.
 */
size_t mast_last_error(char *buf, size_t len);

/**
 * Parses and validates a JSON config.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string.
 */
enum MastStatus mast_config_validate(const char *json);

/**
 * Writes a synthetic dataset of `n` images of side `side` labeled by
 * `label_factor` (`shape`, `hue`, `scale` or `position`) to `dir`.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings.
 */
enum MastStatus mast_dataset_generate(const char *dir,
                                      size_t n,
                                      size_t side,
                                      const char *label_factor,
                                      uint64_t seed);

/**
 * Pretrains with the config file at `config_path` and writes the final
 * checkpoint path (NUL-terminated) into `ckpt_out`.
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated string and `ckpt_out` must
 * point to `len` writable bytes.
 */
enum MastStatus mast_pretrain(const char *config_path, char *ckpt_out, size_t len);

/**
 * Loads a checkpoint. The handle must be released with [`mast_model_free`].
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` writable.
 */
enum MastStatus mast_model_load(const char *path, struct MastModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mast_model_load`] and not be used afterwards.
 */
void mast_model_free(struct MastModel *model);

/**
 * Embedding dimension, number of masks and representation width.
 *
 * # Safety
 * `model` must be a live handle; outputs may be null to skip them.
 */
enum MastStatus mast_model_dims(const struct MastModel *model,
                                size_t *embed_dim,
                                size_t *num_masks,
                                size_t *repr_dim);

/**
 * Copies the `d × K` mask matrix, row-major, into `out`.
 *
 * # Safety
 * `model` must be a live handle and `out` must hold `len` floats.
 */
enum MastStatus mast_model_masks(const struct MastModel *model, float *out, size_t len);

/**
 * Runs `n` images (`[n, 3, height, width]`, values in `[0, 1]`) through the
 * model and writes the means and variances, each `[n, d]`.
 *
 * # Safety
 * `pixels` must hold `n * 3 * height * width` floats; `mean_out` and
 * `var_out` must each hold `len` floats.
 */
enum MastStatus mast_model_embed(const struct MastModel *model,
                                 const float *pixels,
                                 size_t n,
                                 size_t height,
                                 size_t width,
                                 float *mean_out,
                                 float *var_out,
                                 size_t len);

/**
 * Uncertainty scores in `[0, 1]` (covariance traces rescaled over the
 * batch) for `n` images, written to `out`.
 *
 * # Safety
 * As [`mast_model_embed`]; `out` must hold `len` doubles.
 */
enum MastStatus mast_model_uncertainty(const struct MastModel *model,
                                       const float *pixels,
                                       size_t n,
                                       size_t height,
                                       size_t width,
                                       double *out,
                                       size_t len);

/**
 * Cosine similarity between mask columns, `K × K` row-major.
 *
 * # Safety
 * `model` must be a live handle and `out` must hold `len` doubles.
 */
enum MastStatus mast_model_mask_correlation(const struct MastModel *model, double *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAST_FFI_H */
