#ifndef UAL_H
#define UAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum UalStatus {
  UAL_STATUS_OK = 0,
  UAL_STATUS_NULL_POINTER = 1,
  UAL_STATUS_INVALID_UTF8 = 2,
  UAL_STATUS_CONFIG = 3,
  UAL_STATUS_IO = 4,
  UAL_STATUS_INTEGRITY = 5,
  UAL_STATUS_INVALID_ARGUMENT = 6,
  UAL_STATUS_CONTRACT = 7,
  UAL_STATUS_ORACLE = 8,
  UAL_STATUS_FINISHED = 9,
  UAL_STATUS_PANIC = 10,
} UalStatus;

/*
 Opaque trained model.
 */
typedef struct UalModel UalModel;

/*
 Opaque single-seed run driven by the simulated oracle.
 */
typedef struct UalRun UalRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call into the library on this
 thread.
 */
const char *ual_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *ual_version(void);

/*
 Releases a string returned by this library.

 # Safety
 `s` must be null or a pointer obtained from this library that has not
 been freed.
 */
void ual_string_free(char *s);

/*
 Loads a model container from `path` into `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum UalStatus ual_model_load(const char *path, struct UalModel **out);

/*
 Releases a model handle; null is ignored.

 # Safety
 `model` must be null or a live handle from this library.
 */
void ual_model_free(struct UalModel *model);

/*
 Number of classes the model predicts, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t ual_model_class_count(const struct UalModel *model);

/*
 Flattened per-sample feature count, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t ual_model_feature_dim(const struct UalModel *model);

/*
 Monte-Carlo predictive means for `rows` samples of
 `ual_model_feature_dim` features each (row-major). Writes
 `rows × class_count` probabilities to `out`.

 # Safety
 `x` must hold `rows × feature_dim` values and `out` room for
 `rows × class_count`.
 */
enum UalStatus ual_model_predict(const struct UalModel *model,
                                 const double *x,
                                 size_t rows,
                                 size_t samples,
                                 double lambda,
                                 uint64_t seed,
                                 double *out);

/*
 Acquisition scores (higher is more informative) for `rows` samples using
 the named method, e.g. `"entropy"`. Writes `rows` values to `out`.

 # Safety
 As for [`ual_model_predict`]; `method` must be a NUL-terminated string
 and `out` must have room for `rows` values.
 */
enum UalStatus ual_model_score(const struct UalModel *model,
                               const char *method,
                               const double *x,
                               size_t rows,
                               size_t samples,
                               double lambda,
                               uint64_t seed,
                               double *out);

/*
 Starts a run of `seed` (seed set drawn and initial model trained) for the
 TOML experiment config `config_toml`.

 # Safety
 String arguments must be NUL-terminated; `out` must be valid.
 */
enum UalStatus ual_run_start(const char *config_toml,
                             const char *base_dir,
                             uint64_t seed,
                             struct UalRun **out);

/*
 Releases a run handle; null is ignored.

 # Safety
 `run` must be null or a live handle.
 */
void ual_run_free(struct UalRun *run);

/*
 Executes one cycle; returns `Finished` when no cycle is left.

 # Safety
 `run` must be a live handle.
 */
enum UalStatus ual_run_step(struct UalRun *run);

/*
 1 when the run has no cycles left, 0 otherwise (and for null).

 # Safety
 `run` must be null or a live handle.
 */
int32_t ual_run_is_done(const struct UalRun *run);

/*
 Completed cycle reports as a JSON array in `*out` (free with
 [`ual_string_free`]).

 # Safety
 `run` must be a live handle and `out` valid.
 */
enum UalStatus ual_run_reports_json(const struct UalRun *run, char **out);

/*
 Copies the run's current model into a new handle.

 # Safety
 `run` must be a live handle and `out` valid.
 */
enum UalStatus ual_run_model(const struct UalRun *run, struct UalModel **out);

/*
 Writes the run checkpoint container to `path`.

 # Safety
 `run` must be a live handle and `path` NUL-terminated.
 */
enum UalStatus ual_run_save_checkpoint(const struct UalRun *run, const char *path);

/*
 Runs every configured seed with the simulated oracle and writes the
 report files into `out_dir`.

 # Safety
 String arguments must be NUL-terminated.
 */
enum UalStatus ual_experiment_run(const char *config_toml,
                                  const char *base_dir,
                                  const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UAL_H */
