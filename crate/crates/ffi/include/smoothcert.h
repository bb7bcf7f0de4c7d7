#ifndef SMOOTHCERT_H
#define SMOOTHCERT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmcStatus {
  SMC_STATUS_OK = 0,
  SMC_STATUS_NULL_POINTER = 1,
  SMC_STATUS_INVALID_ARGUMENT = 2,
  SMC_STATUS_IO = 3,
  SMC_STATUS_BAD_CHECKPOINT = 4,
  SMC_STATUS_SHAPE_MISMATCH = 5,
  SMC_STATUS_INTERNAL = 6,
} SmcStatus;

/**
 * Opaque model handle. Create with [`smc_model_load`], release with [`smc_model_free`].
 */
typedef struct SmcModel SmcModel;

/**
 * Monte Carlo settings for one call.
 */
typedef struct SmcParams {
  double sigma;
  uint64_t n0;
  uint64_t n;
  double alpha;
  size_t batch;
  uint64_t seed;
} SmcParams;

/**
 * Outcome of [`smc_certify`]. `radius` is 0 when `abstained` is 1.
 */
typedef struct SmcCertification {
  uint32_t predicted;
  uint8_t abstained;
  uint64_t count;
  double p_lower;
  double radius;
} SmcCertification;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Owned by the library.
 */
const char *smc_last_error_message(void);

/**
 * Load a checkpoint file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SmcStatus smc_model_load(const char *path, struct SmcModel **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`smc_model_load`] and not be used afterwards.
 */
void smc_model_free(struct SmcModel *model);

/**
 * Number of output classes; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t smc_model_num_classes(const struct SmcModel *model);

/**
 * Number of floats per input (C·H·W); 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t smc_model_input_len(const struct SmcModel *model);

/**
 * Defaults: n0 = 100, n = 10000, alpha = 0.001, batch = 400.
 */
struct SmcParams smc_default_params(double sigma, uint64_t seed);

/**
 * Certify one input. `id` keys the noise stream, so equal (seed, id)
 * pairs give equal results.
 *
 * # Safety
 * `model` must be a live handle, `input` must point to `input_len` floats,
 * `params` and `out` must be valid pointers.
 */
enum SmcStatus smc_certify(const struct SmcModel *model,
                           const float *input,
                           size_t input_len,
                           uint64_t id,
                           const struct SmcParams *params,
                           struct SmcCertification *out);

/**
 * Smoothed prediction; `*out_class` is -1 on abstention.
 *
 * # Safety
 * As for [`smc_certify`], with `out_class` writable.
 */
enum SmcStatus smc_predict(const struct SmcModel *model,
                           const float *input,
                           size_t input_len,
                           uint64_t id,
                           const struct SmcParams *params,
                           int64_t *out_class);

/**
 * Standard normal quantile.
 *
 * # Safety
 * `out` must be writable.
 */
enum SmcStatus smc_inv_norm_cdf(double p, double *out);

/**
 * One-sided lower Clopper-Pearson bound on a binomial proportion.
 *
 * # Safety
 * `out` must be writable.
 */
enum SmcStatus smc_clopper_pearson_lower(uint64_t k, uint64_t n, double alpha, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMOOTHCERT_H */
