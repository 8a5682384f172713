#ifndef DVA_H
#define DVA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DvaStatus {
  DVA_STATUS_OK = 0,
  DVA_STATUS_NULL_POINTER = 1,
  DVA_STATUS_INVALID_ARGUMENT = 2,
  DVA_STATUS_CONFIG = 3,
  DVA_STATUS_DATA = 4,
  DVA_STATUS_CONTRACT = 5,
  DVA_STATUS_NON_FINITE = 6,
  DVA_STATUS_NON_CONVERGENCE = 7,
  DVA_STATUS_DEGENERATE_RETURNS = 8,
  DVA_STATUS_MISSING_ARTIFACT = 9,
  DVA_STATUS_HASH_MISMATCH = 10,
  DVA_STATUS_IO = 11,
  DVA_STATUS_PARSE = 12,
  DVA_STATUS_PANIC = 13,
} DvaStatus;

/**
 * A loaded checkpoint.
 */
typedef struct DvaModel DvaModel;

/**
 * A diffusion variance schedule.
 */
typedef struct DvaSchedule DvaSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dva_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dva_version(void);

/**
 * Load a JSON checkpoint. `expected_hash` may be null to skip the
 * configuration-hash check.
 *
 * # Safety
 * `path` and a non-null `expected_hash` must be NUL-terminated strings;
 * `out` must be a valid pointer.
 */
enum DvaStatus dva_model_load(const char *path, const char *expected_hash, struct DvaModel **out);

/**
 * # Safety
 * `model` must come from [`dva_model_load`] and not be used afterwards.
 */
void dva_model_free(struct DvaModel *model);

/**
 * Input window length `T`; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dva_model_input_len(const struct DvaModel *model);

/**
 * Prediction horizon `T'`; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dva_model_output_len(const struct DvaModel *model);

/**
 * Predict `T'` gross returns from one window of `T` feature rows, each row
 * `open, high, low, volume, delta, r` as produced by featurization.
 * `x_len` must be `6 * T` and `out_len` must be `T'`.
 *
 * # Safety
 * `x` must point to `x_len` doubles and `out` to `out_len` writable doubles.
 */
enum DvaStatus dva_model_predict(const struct DvaModel *model,
                                 const double *x,
                                 size_t x_len,
                                 double *out,
                                 size_t out_len);

/**
 * Linear schedule of `n_steps` betas with the target schedule scaled by
 * `gamma_scale`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DvaStatus dva_schedule_new(size_t n_steps,
                                double beta_min,
                                double beta_max,
                                double gamma_scale,
                                struct DvaSchedule **out);

/**
 * # Safety
 * `schedule` must come from [`dva_schedule_new`] and not be used afterwards.
 */
void dva_schedule_free(struct DvaSchedule *schedule);

/**
 * Cumulative alpha at step `n` (`0..=N`); `target != 0` selects the target
 * schedule.
 *
 * # Safety
 * `schedule` must be a live handle and `out` a valid pointer.
 */
enum DvaStatus dva_schedule_alpha_bar(const struct DvaSchedule *schedule,
                                      size_t n,
                                      int target,
                                      double *out);

/**
 * Long-only, fully invested weights maximizing `w'mu - gamma/2 w'Sigma w`.
 *
 * # Safety
 * `mu` and `out_w` must hold `n` doubles, `sigma` `n * n`.
 */
enum DvaStatus dva_mean_variance_weights(const double *mu,
                                         const double *sigma,
                                         size_t n,
                                         double gamma,
                                         double *out_w);

/**
 * Sparse precision matrix with off-diagonal L1 penalty `lambda`.
 *
 * # Safety
 * `sigma` and `out_theta` must hold `n * n` doubles.
 */
enum DvaStatus dva_graphical_lasso(const double *sigma, size_t n, double lambda, double *out_theta);

/**
 * Mean over sample standard deviation of `n` returns.
 *
 * # Safety
 * `returns` must hold `n` doubles and `out` be a valid pointer.
 */
enum DvaStatus dva_sharpe(const double *returns, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DVA_H */
