#ifndef SHADAGRAD_H
#define SHADAGRAD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ShgStatus {
  SHG_STATUS_OK = 0,
  SHG_STATUS_NULL_POINTER = 1,
  SHG_STATUS_INVALID_UTF8 = 2,
  SHG_STATUS_INVALID_ARGUMENT = 3,
  SHG_STATUS_SHAPE = 4,
  SHG_STATUS_NUMERICAL = 5,
  SHG_STATUS_CONFIG = 6,
  SHG_STATUS_IO = 7,
  SHG_STATUS_GATE_EXHAUSTED = 8,
  SHG_STATUS_BUFFER_TOO_SMALL = 9,
  SHG_STATUS_PANIC = 10,
} ShgStatus;

/**
 * A running gradient history with its preconditioner.
 */
typedef struct ShgHistory ShgHistory;

/**
 * A built problem instance.
 */
typedef struct ShgProblem ShgProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *shg_last_error(void);

/**
 * Static name of a status code.
 */
const char *shg_status_name(enum ShgStatus status);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void shg_string_free(char *s);

/**
 * Builds a problem from a JSON spec such as
 * `{"name": "quartic_sigmoid", "n": 128, "d": 16, "seed": 0}`.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string; `out` must be writable.
 */
enum ShgStatus shg_problem_from_json(const char *spec_json, struct ShgProblem **out);

/**
 * # Safety
 * `p` must be null or a handle from [`shg_problem_from_json`] not yet freed.
 */
void shg_problem_free(struct ShgProblem *p);

/**
 * # Safety
 * `p` must be a live handle; `n` and `dim` must be writable.
 */
enum ShgStatus shg_problem_shape(const struct ShgProblem *p, size_t *n, size_t *dim);

/**
 * Objective value at `x`.
 *
 * # Safety
 * `x` must point to `len` doubles; `out` must be writable.
 */
enum ShgStatus shg_problem_value(const struct ShgProblem *p,
                                 const double *x,
                                 size_t len,
                                 double *out);

/**
 * Full gradient at `x` into `grad`, which must hold `dim` doubles.
 *
 * # Safety
 * `x` must point to `len` doubles and `grad` to `grad_len` writable doubles.
 */
enum ShgStatus shg_problem_full_grad(const struct ShgProblem *p,
                                     const double *x,
                                     size_t len,
                                     double *grad,
                                     size_t grad_len);

/**
 * Mean gradient over the instances in `batch`.
 *
 * # Safety
 * `batch` must point to `batch_len` indices, `x` to `len` doubles and
 * `grad` to `grad_len` writable doubles.
 */
enum ShgStatus shg_problem_batch_grad(const struct ShgProblem *p,
                                      const size_t *batch,
                                      size_t batch_len,
                                      const double *x,
                                      size_t len,
                                      double *grad,
                                      size_t grad_len);

/**
 * Worst relative finite-difference error of the gradient at `x`.
 *
 * # Safety
 * `x` must point to `len` doubles; `out` must be writable.
 */
enum ShgStatus shg_problem_fd_check(const struct ShgProblem *p,
                                    const double *x,
                                    size_t len,
                                    double h,
                                    double *out);

/**
 * Runs one optimizer configuration (JSON with the fields of
 * `OptimizerConfig`) and returns the per-epoch rows as JSON in `out_json`.
 *
 * # Safety
 * `p` must be a live handle, `config_json` a NUL-terminated string and
 * `out_json` writable. Free the result with [`shg_string_free`].
 */
enum ShgStatus shg_run(const struct ShgProblem *p,
                       const char *config_json,
                       size_t epochs,
                       uint64_t seed,
                       char **out_json);

/**
 * Runs a full experiment config; `out_dir` may be null to use the config's.
 * The written index is returned as JSON in `out_json`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_json` must be writable.
 */
enum ShgStatus shg_experiment_run(const char *config_json,
                                  const char *out_dir,
                                  size_t workers,
                                  char **out_json);

/**
 * A history for `dim`-dimensional gradients and `m` steps per epoch.
 * A negative `fixed_delta` selects the adaptive perturbation.
 *
 * # Safety
 * `out` must be writable.
 */
enum ShgStatus shg_history_new(size_t dim,
                               size_t m,
                               double gamma,
                               double fixed_delta,
                               struct ShgHistory **out);

/**
 * # Safety
 * `h` must be null or a handle from [`shg_history_new`] not yet freed.
 */
void shg_history_free(struct ShgHistory *h);

/**
 * # Safety
 * `h` must be a live handle and `g` must point to `len` doubles.
 */
enum ShgStatus shg_history_push(struct ShgHistory *h, const double *g, size_t len);

/**
 * # Safety
 * `h` must be a live handle.
 */
enum ShgStatus shg_history_seal_epoch(struct ShgHistory *h);

/**
 * `G^{-1/2} g` for the current history.
 *
 * # Safety
 * `g` must point to `len` doubles, `out` to `out_len` writable doubles.
 */
enum ShgStatus shg_history_precondition(const struct ShgHistory *h,
                                        const double *g,
                                        size_t len,
                                        double *out,
                                        size_t out_len);

/**
 * The current perturbation `delta`.
 *
 * # Safety
 * `h` must be a live handle; `out` must be writable.
 */
enum ShgStatus shg_history_delta(const struct ShgHistory *h, double *out);

/**
 * Serializes the history to JSON.
 *
 * # Safety
 * `h` must be a live handle; `out_json` must be writable.
 */
enum ShgStatus shg_history_snapshot(const struct ShgHistory *h, char **out_json);

/**
 * Rebuilds a history from [`shg_history_snapshot`] output.
 *
 * # Safety
 * `json_text` must be NUL-terminated; `out` must be writable.
 */
enum ShgStatus shg_history_restore(const char *json_text, struct ShgHistory **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHADAGRAD_H */
