#ifndef MACS_H
#define MACS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MacsMetric {
  MACS_METRIC_COSINE = 0,
  MACS_METRIC_EUCLIDEAN = 1,
} MacsMetric;

/**
 * Status codes. Codes 1 to 4 mirror the CLI exit codes.
 */
typedef enum MacsStatus {
  MACS_STATUS_OK = 0,
  MACS_STATUS_ERROR = 1,
  MACS_STATUS_CONFIG = 2,
  MACS_STATUS_STALE = 3,
  MACS_STATUS_NUMERIC = 4,
  MACS_STATUS_NULL_POINTER = 5,
  MACS_STATUS_INVALID_UTF8 = 6,
  MACS_STATUS_PANIC = 7,
} MacsStatus;

/**
 * Opaque skill database handle.
 */
typedef struct MacsDatabase MacsDatabase;

/**
 * Opaque skill encoder handle.
 */
typedef struct MacsEncoder MacsEncoder;

/**
 * Opaque pipeline handle.
 */
typedef struct MacsPipeline MacsPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *macs_last_error(void);

/**
 * Creates a pipeline writing under `out_dir`. `config_toml` may be null, in
 * which case `profile` ("desk" or "paper-scale") selects a built-in config.
 *
 * # Safety
 * String arguments must be null or valid nul-terminated strings; `out` must
 * be a valid pointer.
 */
enum MacsStatus macs_pipeline_new(const char *config_toml,
                                  const char *profile,
                                  const char *out_dir,
                                  struct MacsPipeline **out);

/**
 * Runs one stage by CLI name (e.g. "gen-data"), or every stage for "run".
 *
 * # Safety
 * `handle` must come from [`macs_pipeline_new`]; `stage` must be a valid
 * nul-terminated string.
 */
enum MacsStatus macs_pipeline_run(struct MacsPipeline *handle, const char *stage, bool force);

/**
 * # Safety
 * `handle` must be null or come from [`macs_pipeline_new`] and not be used
 * afterwards.
 */
void macs_pipeline_free(struct MacsPipeline *handle);

/**
 * Loads a trained skill encoder.
 *
 * # Safety
 * `path` must be a valid nul-terminated string; `out` a valid pointer.
 */
enum MacsStatus macs_encoder_load(const char *path, struct MacsEncoder **out);

/**
 * Skill vector dimension of the encoder.
 *
 * # Safety
 * `handle` must come from [`macs_encoder_load`].
 */
enum MacsStatus macs_encoder_dim(const struct MacsEncoder *handle, size_t *out);

/**
 * # Safety
 * `handle` must be null or come from [`macs_encoder_load`].
 */
void macs_encoder_free(struct MacsEncoder *handle);

/**
 * Loads a skill database directory, verifying checksums.
 *
 * # Safety
 * `dir` must be a valid nul-terminated string; `out` a valid pointer.
 */
enum MacsStatus macs_db_load(const char *dir, struct MacsDatabase **out);

/**
 * Number of entries and skill dimension.
 *
 * # Safety
 * `handle` must come from [`macs_db_load`]; outputs must be valid pointers.
 */
enum MacsStatus macs_db_shape(const struct MacsDatabase *handle, size_t *len, size_t *dim);

/**
 * FastDTW distance between `query` (`query_len` x dim, row-major) and
 * entry `index` of the database.
 *
 * # Safety
 * `query` must hold `query_len * dim` values; other pointers must be valid.
 */
enum MacsStatus macs_db_distance(const struct MacsDatabase *handle,
                                 size_t index,
                                 const double *query,
                                 size_t query_len,
                                 size_t radius,
                                 enum MacsMetric metric,
                                 double *out);

/**
 * # Safety
 * `handle` must be null or come from [`macs_db_load`].
 */
void macs_db_free(struct MacsDatabase *handle);

/**
 * Cosine distance `1 - cos(a, b)` between two vectors of length `dim`.
 *
 * # Safety
 * `a` and `b` must hold `dim` values; `out` must be valid.
 */
enum MacsStatus macs_cosine_distance(const double *a, const double *b, size_t dim, double *out);

/**
 * FastDTW distance between two row-major sequences of `dim`-vectors.
 *
 * # Safety
 * `a` must hold `len_a * dim` values and `b` `len_b * dim`; `out` must be
 * valid.
 */
enum MacsStatus macs_fastdtw(const double *a,
                             size_t len_a,
                             const double *b,
                             size_t len_b,
                             size_t dim,
                             size_t radius,
                             enum MacsMetric metric,
                             double *out);

/**
 * Standard error of a success rate `p` over `n` episodes.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MacsStatus macs_sem(double p, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MACS_H */
