#ifndef BLOCKPREC_H
#define BLOCKPREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BpStatus {
  BP_STATUS_OK = 0,
  BP_STATUS_CONFIG = 1,
  BP_STATUS_DATA = 2,
  BP_STATUS_NUMERIC = 3,
  BP_STATUS_VALIDATION = 4,
  BP_STATUS_INTERNAL = 5,
  BP_STATUS_NULL_POINTER = 6,
  BP_STATUS_PANIC = 7,
} BpStatus;

/**
 * Quantized tensor handle.
 */
typedef struct BpTensor BpTensor;

/**
 * Training session handle.
 */
typedef struct BpTrainer BpTrainer;

/**
 * Per-epoch figures; absent values are NaN.
 */
typedef struct BpEpochMetrics {
  size_t epoch;
  double train_loss;
  double val_acc;
  double avg_bw_w;
  double avg_bw_a;
  double lambda_w;
  double lambda_a;
  double macbits;
} BpEpochMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length plus one.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t bp_last_error_message(char *buf, size_t len);

/**
 * Quantizes `values` of shape `shape[0..ndim]` for data role `role`
 * (0 weight, 1 activation, 2 activation gradient). With `bits` null every
 * block uses `uniform_bits`; otherwise `bits` holds one width per map entry.
 *
 * # Safety
 * Pointers must be valid for the lengths implied by `shape`, `ndim` and
 * `n_bits`; `out` must be writable.
 */
enum BpStatus bp_tensor_quantize(const double *values,
                                 const size_t *shape,
                                 size_t ndim,
                                 uint8_t role,
                                 const uint8_t *bits,
                                 size_t n_bits,
                                 uint8_t uniform_bits,
                                 struct BpTensor **out);

/**
 * Element count of the tensor (0 for null).
 *
 * # Safety
 * `t` must be null or a live handle.
 */
size_t bp_tensor_len(const struct BpTensor *t);

/**
 * Map entries (4×4 tiles) of the tensor (0 for null).
 *
 * # Safety
 * `t` must be null or a live handle.
 */
size_t bp_tensor_entries(const struct BpTensor *t);

/**
 * Writes the reconstructed values into `out[0..len]`; `len` must equal
 * [`bp_tensor_len`].
 *
 * # Safety
 * `t` must be a live handle and `out` valid for `len` writes.
 */
enum BpStatus bp_tensor_dequantize(const struct BpTensor *t, double *out, size_t len);

/**
 * Writes the binary block dump of the tensor to `path`.
 *
 * # Safety
 * `t` must be a live handle and `path` a NUL-terminated string.
 */
enum BpStatus bp_tensor_dump(const struct BpTensor *t, const char *path);

/**
 * # Safety
 * `t` must be null or a handle from [`bp_tensor_quantize`] not yet freed.
 */
void bp_tensor_free(struct BpTensor *t);

/**
 * `½ log2(S/T)`; `S = 0` writes `-INFINITY`.
 *
 * # Safety
 * `out` must be writable.
 */
enum BpStatus bp_relative_sensitivity(double s, double t, double *out);

/**
 * # Safety
 * `r` must hold `n` values and `out` be writable.
 */
enum BpStatus bp_initial_lambda(const double *r, size_t n, double alpha, double *out);

/**
 * # Safety
 * `r` must hold `n` values and `out` be writable.
 */
enum BpStatus bp_tune_lambda(double lambda_in,
                             const double *r,
                             size_t n,
                             double alpha,
                             size_t iterations,
                             double beta,
                             double *out);

/**
 * # Safety
 * `r` must hold `n` values and `out` room for `n`.
 */
enum BpStatus bp_bitwidths_from_lambda(const double *r,
                                       size_t n,
                                       double lambda,
                                       double beta,
                                       double *out);

/**
 * Rounds smoothed widths to {0,2,4,6,8}.
 *
 * # Safety
 * `smoothed` must hold `n` values and `out` room for `n`.
 */
enum BpStatus bp_round_map(const double *smoothed, size_t n, double beta, uint8_t *out);

/**
 * Exact integer allocation. `allowed` is 0 for every integer in [0, β],
 * 1 for {0,2,4,6,8}.
 *
 * # Safety
 * `s` and `t` must hold `n` values and `out` room for `n`.
 */
enum BpStatus bp_exact_micp(const double *s,
                            const double *t,
                            size_t n,
                            double alpha,
                            uint8_t beta,
                            uint8_t allowed,
                            uint8_t *out);

/**
 * `weights` may be null for the unweighted mean.
 *
 * # Safety
 * `r` (and `weights` when non-null) must hold `n` values; `out` writable.
 */
enum BpStatus bp_lambda_bisection(const double *r,
                                  const double *weights,
                                  size_t n,
                                  double alpha,
                                  double beta,
                                  double *out);

/**
 * Builds a trainer from config text in the CLI's TOML format. Nothing is
 * written to disk.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` writable.
 */
enum BpStatus bp_trainer_new_from_config(const char *config, struct BpTrainer **out);

/**
 * Runs one epoch, then regenerates the bit-width maps.
 *
 * # Safety
 * `t` must be a live handle and `out` writable (or null to discard).
 */
enum BpStatus bp_trainer_train_epoch(struct BpTrainer *t, struct BpEpochMetrics *out);

/**
 * # Safety
 * `t` must be null or a handle from [`bp_trainer_new_from_config`] not yet freed.
 */
void bp_trainer_free(struct BpTrainer *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLOCKPREC_H */
