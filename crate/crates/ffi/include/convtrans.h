#ifndef CONVTRANS_H
#define CONVTRANS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes.
 */
typedef enum CtStatus {
  CT_STATUS_OK = 0,
  CT_STATUS_NULL_POINTER = 1,
  CT_STATUS_INVALID_ARGUMENT = 2,
  CT_STATUS_BUFFER_TOO_SMALL = 3,
  CT_STATUS_IO = 4,
  CT_STATUS_CHECKPOINT = 5,
  CT_STATUS_PARSE = 6,
  CT_STATUS_CONFIG = 7,
  CT_STATUS_DOMAIN = 8,
  CT_STATUS_SHAPE = 9,
  CT_STATUS_TOO_SHORT = 10,
  CT_STATUS_DEGENERATE = 11,
  CT_STATUS_NUMERIC = 12,
  CT_STATUS_DATA = 13,
  CT_STATUS_PANIC = 14,
} CtStatus;

/**
 * Opaque model handle.
 */
typedef struct CtModel CtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *ct_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ct_version(void);

/**
 * Loads a `.ckpt` file, or a directory holding `model.ckpt` or a compiled
 * curriculum (`compiled.csv`). On success `*out` owns a handle to release
 * with [`ct_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CtStatus ct_model_load(const char *path, struct CtModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`ct_model_load`] and not be used afterwards.
 */
void ct_model_free(struct CtModel *model);

/**
 * Values written per trajectory: 1 for exponent regression, 5 class
 * probabilities for model classification.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CtStatus ct_model_output_len(const struct CtModel *model, size_t *out);

/**
 * Predicts for `count` trajectories stored back to back in `positions`,
 * the i-th having `lengths[i]` points. Writes `count × output_len` values
 * to `out`: the raw exponent estimate, or the class probabilities in code
 * order (ATTM, CTRW, FBM, LW, SBM). Trajectories are standardized first.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
enum CtStatus ct_model_predict(const struct CtModel *model,
                               const double *positions,
                               const size_t *lengths,
                               size_t count,
                               double *out,
                               size_t out_len);

/**
 * Simulates one trajectory of `length` points into `out`. `model_code` is
 * 0..4 for ATTM, CTRW, FBM, LW, SBM. Pass an infinite `snr` for a
 * noiseless path.
 *
 * # Safety
 * `out` must hold at least `out_len` doubles.
 */
enum CtStatus ct_generate(uint32_t model_code,
                          double alpha,
                          size_t length,
                          uint64_t seed,
                          double snr,
                          double *out,
                          size_t out_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CONVTRANS_H */
