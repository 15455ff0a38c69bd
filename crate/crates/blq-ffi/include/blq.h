#ifndef BLQ_H
#define BLQ_H

/* Generated by cbindgen from the blq-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Riccati route selector.
typedef enum BlqRoute {
  BLQ_ROUTE_AUTO = 0,
  BLQ_ROUTE_ODE = 1,
  BLQ_ROUTE_EPS = 2,
  BLQ_ROUTE_MARKOV = 3,
} BlqRoute;

// Status codes returned by every API call.
typedef enum BlqStatus {
  BLQ_STATUS_OK = 0,
  BLQ_STATUS_NULL_ARGUMENT = 1,
  BLQ_STATUS_INVALID_UTF8 = 2,
  BLQ_STATUS_PARSE_ERROR = 3,
  BLQ_STATUS_VALIDATION_ERROR = 4,
  BLQ_STATUS_SOLVER_ERROR = 5,
  BLQ_STATUS_VERIFICATION_FAILED = 6,
  BLQ_STATUS_IO_ERROR = 7,
  BLQ_STATUS_PANIC = 8,
} BlqStatus;

// Opaque problem handle.
typedef struct BlqProblem BlqProblem;

// Opaque solution handle.
typedef struct BlqSolution BlqSolution;

// Solver configuration; `degree` and `rational` describe the regression
// basis, `eps_*` only matter for the eps route.
typedef struct BlqSolveOptions {
  size_t steps;
  size_t paths;
  uint64_t seed;
  uint32_t degree;
  bool rational;
  enum BlqRoute route;
} BlqSolveOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Default options: K=100, M=10^4, seed 1, degree-4 basis with the rational
// feature, automatic route.
struct BlqSolveOptions blq_solve_options_default(void);

// Message describing the most recent failure on this thread. The pointer is
// valid until the next failing call on the same thread.
const char *blq_last_error_message(void);

// Parse a problem definition from a JSON string.
//
// # Safety
// `json` must point to a NUL-terminated string and `out` must be a valid
// pointer; the returned handle is released with [`blq_problem_free`].
enum BlqStatus blq_problem_from_json(const char *json, struct BlqProblem **out);

// Load a problem definition from a JSON file.
//
// # Safety
// See [`blq_problem_from_json`].
enum BlqStatus blq_problem_load(const char *path, struct BlqProblem **out);

// Release a problem handle. Null is ignored.
//
// # Safety
// `p` must come from this library and must not be used afterwards.
void blq_problem_free(struct BlqProblem *p);

// State and control dimensions of a problem.
//
// # Safety
// All pointers must be valid.
enum BlqStatus blq_problem_dims(const struct BlqProblem *p, size_t *state_dim, size_t *control_dim);

// Audit the standing assumptions on the default sample grid.
//
// # Safety
// `p` must be a valid handle.
enum BlqStatus blq_problem_validate(const struct BlqProblem *p);

// Run the solve pipeline; on success `out` owns a solution handle.
//
// # Safety
// `p` must be a valid handle; `opts` may be null (defaults apply); `out`
// must be valid. Release the solution with [`blq_solution_free`].
enum BlqStatus blq_solve(const struct BlqProblem *p,
                         const struct BlqSolveOptions *opts,
                         struct BlqSolution **out);

// Release a solution handle. Null is ignored.
//
// # Safety
// `s` must come from [`blq_solve`] and must not be used afterwards.
void blq_solution_free(struct BlqSolution *s);

// L2 norm of the solved optimal control.
//
// # Safety
// All pointers must be valid.
enum BlqStatus blq_solution_control_norm(const struct BlqSolution *s, double *out);

// Monte Carlo cost of the solved control and its standard error.
//
// # Safety
// `s` must be valid; either output pointer may be null to skip it.
enum BlqStatus blq_solution_cost(const struct BlqSolution *s, double *total, double *stderr);

// Number of grid steps of the solved problem.
//
// # Safety
// All pointers must be valid.
enum BlqStatus blq_solution_steps(const struct BlqSolution *s, size_t *out);

// Path-averaged Riccati solution slice at a grid step, written row-major
// into `buf` (length at least n*n).
//
// # Safety
// `buf` must point to at least `len` doubles.
enum BlqStatus blq_solution_sigma_mean(const struct BlqSolution *s,
                                       size_t step,
                                       double *buf,
                                       size_t len);

// Run the verification battery on a solved handle. Returns `Ok` when every
// criterion passes and `VerificationFailed` otherwise; in both cases
// `report_json`, when non-null, receives a JSON report to be released with
// [`blq_string_free`].
//
// # Safety
// `s` must be a valid solution handle.
enum BlqStatus blq_verify(const struct BlqSolution *s, char **report_json);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and must not be used afterwards.
void blq_string_free(char *s);

// Evaluate the cost of the zero control, a quick smoke entry point for
// bindings.
//
// # Safety
// All pointers must be valid.
enum BlqStatus blq_zero_control_cost(const struct BlqProblem *p,
                                     const struct BlqSolveOptions *opts,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLQ_H */
