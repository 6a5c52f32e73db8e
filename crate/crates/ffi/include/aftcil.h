#ifndef AFTCIL_H
#define AFTCIL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AftStatus {
  AFT_STATUS_OK = 0,
  /**
   * Bad argument, null pointer or invalid configuration.
   */
  AFT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Unreadable or inconsistent data, I/O failure, corrupt checkpoint.
   */
  AFT_STATUS_DATA_ERROR = 2,
  /**
   * Non-finite loss or an internal shape failure.
   */
  AFT_STATUS_NUMERIC_ERROR = 3,
  AFT_STATUS_PANIC = 4,
} AftStatus;

/**
 * A stored model that labels raw audio.
 */
typedef struct AftClassifier AftClassifier;

/**
 * A configured training run over one dataset.
 */
typedef struct AftRun AftRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *aft_last_error(void);

/**
 * MFCCs of a mono clip with the default front end (16 kHz, first 3 s,
 * 40 coefficients). The clip is resampled and padded first.
 *
 * Writes `n_coeffs * frames` values coefficient-major into `out`. With
 * `out` null only the dimensions are reported.
 *
 * # Safety
 * `samples` must point to `n_samples` readable values and `out`, when not
 * null, to `out_len` writable ones.
 */
enum AftStatus aft_mfcc_extract(const double *samples,
                                size_t n_samples,
                                uint32_t sample_rate,
                                double *out,
                                size_t out_len,
                                size_t *n_coeffs,
                                size_t *frames);

/**
 * Average accuracy over the final row of a `tasks x tasks` row-major
 * accuracy matrix. Entries above the diagonal are ignored.
 *
 * # Safety
 * `matrix` must point to `tasks * tasks` values; `out` must be writable.
 */
enum AftStatus aft_compute_acc(const double *matrix, size_t tasks, double *out);

/**
 * Backward transfer of a `tasks x tasks` row-major accuracy matrix;
 * needs at least two tasks.
 *
 * # Safety
 * As for [`aft_compute_acc`].
 */
enum AftStatus aft_compute_bwt(const double *matrix, size_t tasks, double *out);

/**
 * Creates a run from a TOML config (null for defaults) and a dataset path
 * in any layout the command-line `ingest` accepts.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` must be writable.
 */
enum AftStatus aft_run_new(const char *config_path, const char *dataset_path, struct AftRun **out);

/**
 * Overrides the seed, epoch count and batch size; zero keeps the
 * configured value for epochs and batch size.
 *
 * # Safety
 * `run` must come from [`aft_run_new`].
 */
enum AftStatus aft_run_set_schedule(struct AftRun *run, uint64_t seed, size_t epochs, size_t batch);

/**
 * Ingests the dataset (using its feature cache) and trains the whole task
 * sequence. Blocks until done.
 *
 * # Safety
 * `run` must come from [`aft_run_new`].
 */
enum AftStatus aft_run_execute(struct AftRun *run);

/**
 * # Safety
 * `run` must come from [`aft_run_new`]; `out` must be writable.
 */
enum AftStatus aft_run_acc(const struct AftRun *run, double *out);

/**
 * Sets `*defined` to false for joint training, which has no backward
 * transfer.
 *
 * # Safety
 * `run` must come from [`aft_run_new`]; `out` and `defined` must be
 * writable.
 */
enum AftStatus aft_run_bwt(const struct AftRun *run, double *out, bool *defined);

/**
 * Writes the executed run to a new directory, as `aftcil train` does.
 *
 * # Safety
 * `run` must come from [`aft_run_new`]; `dir` must be nul-terminated.
 */
enum AftStatus aft_run_write(const struct AftRun *run, const char *dir);

/**
 * # Safety
 * `run` must come from [`aft_run_new`] or be null; it is invalid afterwards.
 */
void aft_run_free(struct AftRun *run);

/**
 * Loads a checkpoint written by a run (`model.ckpt`).
 *
 * # Safety
 * `path` must be nul-terminated; `out` must be writable.
 */
enum AftStatus aft_classifier_load(const char *path, struct AftClassifier **out);

/**
 * Number of classes the model can output; 0 for a null handle.
 *
 * # Safety
 * `c` must come from [`aft_classifier_load`] or be null.
 */
size_t aft_classifier_num_classes(const struct AftClassifier *c);

/**
 * Name of class `index`, owned by the handle; null when out of range.
 *
 * # Safety
 * `c` must come from [`aft_classifier_load`] or be null.
 */
const char *aft_classifier_class_name(const struct AftClassifier *c, size_t index);

/**
 * Classifies a mono clip; `*class_index` indexes
 * [`aft_classifier_class_name`].
 *
 * # Safety
 * `samples` must point to `n_samples` values; `class_index` must be
 * writable.
 */
enum AftStatus aft_classifier_predict(const struct AftClassifier *c,
                                      const double *samples,
                                      size_t n_samples,
                                      uint32_t sample_rate,
                                      size_t *class_index);

/**
 * # Safety
 * `c` must come from [`aft_classifier_load`] or be null; it is invalid
 * afterwards.
 */
void aft_classifier_free(struct AftClassifier *c);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AFTCIL_H */
