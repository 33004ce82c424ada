#ifndef FLEXO_H
#define FLEXO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  FLEXO_STATUS_OK = 0,
  FLEXO_STATUS_NULL_POINTER = 1,
  FLEXO_STATUS_INVALID_ARGUMENT = 2,
  FLEXO_STATUS_NON_CONVERGENCE = 3,
  FLEXO_STATUS_IO = 4,
  FLEXO_STATUS_PANIC = 5,
} FlexoStatus;

/**
 * Output of the full workflow.
 */
typedef struct FlexoAssignment FlexoAssignment;

/**
 * Problem data: cost, reference point, ball radius and affine rows.
 */
typedef struct FlexoProblem FlexoProblem;

/**
 * A scenario: problem, chance parameters, search region, models and settings.
 */
typedef struct FlexoScenario FlexoScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t flexo_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *flexo_version(void);

/**
 * Builds a problem. `d` is the row-major `c x n` affine matrix.
 *
 * # Safety
 * `weights` and `x_ref` must hold `n` values, `d` `c * n` values, `e` `c`
 * values, and `out` must be valid for a write.
 */
FlexoStatus flexo_problem_new(size_t n,
                              double eps_x,
                              double eps_beta,
                              const double *weights,
                              const double *x_ref,
                              double gamma,
                              size_t c,
                              const double *d,
                              const double *e,
                              FlexoProblem **out);

/**
 * # Safety
 * `problem` must be null or a handle from [`flexo_problem_new`] not yet freed.
 */
void flexo_problem_free(FlexoProblem *problem);

/**
 * Number of users of a problem, or 0 for a null handle.
 *
 * # Safety
 * `problem` must be null or a live handle.
 */
size_t flexo_problem_users(const FlexoProblem *problem);

/**
 * Solves the hyperbox-robust problem with default solver settings.
 *
 * # Safety
 * `problem` must be a live handle; `x_out` and `beta_out` must hold `n` values.
 */
FlexoStatus flexo_robust_solve(const FlexoProblem *problem,
                               size_t n,
                               double *x_out,
                               double *beta_out);

/**
 * Vertex-oracle feasibility of `(x, beta)`; writes the verdict (1 or 0) and
 * the worst constraint margin.
 *
 * # Safety
 * `problem` must be a live handle, `x` and `beta` must hold `n` values and
 * the output pointers must be valid for writes.
 */
FlexoStatus flexo_check_decision(const FlexoProblem *problem,
                                 size_t n,
                                 const double *x,
                                 const double *beta,
                                 int32_t *feasible_out,
                                 double *worst_margin_out);

/**
 * Parses a scenario from NUL-terminated TOML text.
 *
 * # Safety
 * `toml` must be a valid C string and `out` valid for a write.
 */
FlexoStatus flexo_scenario_from_toml(const char *toml, FlexoScenario **out);

/**
 * The frozen seven-user scenario used by the command-line defaults.
 *
 * # Safety
 * `out` must be valid for a write.
 */
FlexoStatus flexo_scenario_frozen(FlexoScenario **out);

/**
 * # Safety
 * `scenario` must be null or a live handle.
 */
void flexo_scenario_free(FlexoScenario *scenario);

/**
 * Number of users of a scenario, or 0 for a null handle.
 *
 * # Safety
 * `scenario` must be null or a live handle.
 */
size_t flexo_scenario_users(const FlexoScenario *scenario);

/**
 * Runs the workflow with `t` model-based steps and the scenario's guard and
 * rounding settings.
 *
 * # Safety
 * `scenario` must be a live handle and `out` valid for a write.
 */
FlexoStatus flexo_run_pipeline(const FlexoScenario *scenario, size_t t, FlexoAssignment **out);

/**
 * Copies the assigned centres and radii.
 *
 * # Safety
 * `assignment` must be a live handle; `x_out` and `beta_out` must hold `n` values.
 */
FlexoStatus flexo_assignment_decision(const FlexoAssignment *assignment,
                                      size_t n,
                                      double *x_out,
                                      double *beta_out);

/**
 * `max_j E[h_j]` of the assignment under the true model.
 *
 * # Safety
 * `assignment` must be a live handle and `out` valid for a write.
 */
FlexoStatus flexo_assignment_cv(const FlexoAssignment *assignment, double *out);

/**
 * # Safety
 * `assignment` must be null or a live handle.
 */
void flexo_assignment_free(FlexoAssignment *assignment);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLEXO_H */
