#ifndef DSEG_H
#define DSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsegLabel {
  DSEG_LABEL_HEALTHY = 0,
  DSEG_LABEL_DISEASE = 1,
} DsegLabel;

typedef enum DsegStatus {
  DSEG_STATUS_OK = 0,
  DSEG_STATUS_NULL_ARGUMENT = 1,
  DSEG_STATUS_INVALID_ARGUMENT = 2,
  DSEG_STATUS_IO = 3,
  DSEG_STATUS_FORMAT = 4,
  DSEG_STATUS_CONFIG = 5,
  DSEG_STATUS_DATA = 6,
  DSEG_STATUS_NUMERIC = 7,
  DSEG_STATUS_LOAD = 8,
  DSEG_STATUS_PANIC = 9,
} DsegStatus;

/**
 * A loaded model. Not safe to use from two threads at once.
 */
typedef struct DsegModel DsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on this thread.
 */
const char *dseg_last_error(void);

/**
 * Loads a checkpoint written by the `dseg` trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsegStatus dseg_model_load(const char *path, struct DsegModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`dseg_model_load`] and not be used afterwards.
 */
void dseg_model_free(struct DsegModel *model);

/**
 * Side length of the cubic volumes the model accepts.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum DsegStatus dseg_model_grid_size(const struct DsegModel *model, size_t *out);

/**
 * Whether the model produces reconstructions and pseudo-healthy images
 * (1) or only masks (0).
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum DsegStatus dseg_model_has_pseudo_healthy(const struct DsegModel *model, int32_t *out);

/**
 * Runs inference on one `n³` volume (row-major z, y, x; values in [0, 1]).
 * `probs` receives lesion probabilities. `recon` and `pseudo_healthy` may
 * be null; when given they are filled if the model produces them and
 * zeroed otherwise. Every buffer holds `len = n³` floats.
 *
 * # Safety
 * Non-null buffers must be valid for `len` floats.
 */
enum DsegStatus dseg_model_infer(struct DsegModel *model,
                                 const float *volume,
                                 size_t len,
                                 float *probs,
                                 float *recon,
                                 float *pseudo_healthy);

/**
 * Generates one desk-scale phantom case of side `grid_size` into
 * `volume` and `mask` (each `grid_size³` floats).
 *
 * # Safety
 * Both buffers must be valid for `len` floats.
 */
enum DsegStatus dseg_phantom_case(size_t grid_size,
                                  uint64_t seed,
                                  enum DsegLabel label,
                                  float *volume,
                                  float *mask,
                                  size_t len);

/**
 * Dice coefficient of two masks of `len` voxels, each binarized at 0.5.
 * Two empty masks score 1.
 *
 * # Safety
 * `pred` and `gt` must be valid for `len` floats; `out` must be valid.
 */
enum DsegStatus dseg_dice(const float *pred, const float *gt, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSEG_H */
