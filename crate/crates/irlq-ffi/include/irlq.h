#ifndef IRLQ_H
#define IRLQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Controller selection strategy.
 */
typedef enum {
  IrlqMode_Auto = 0,
  IrlqMode_Open = 1,
  IrlqMode_Closed = 2,
} IrlqMode;

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  IrlqStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  IrlqStatus_NullPointer = 1,
  /**
   * Malformed input: bad JSON, bad dimensions, inadmissible data.
   */
  IrlqStatus_InvalidInput = 2,
  /**
   * The solve finished with an unsolvable verdict (the solution handle is
   * still produced and carries the report).
   */
  IrlqStatus_Unsolvable = 3,
  /**
   * Integration diverged or a matrix was numerically singular.
   */
  IrlqStatus_NumericalFailure = 4,
  /**
   * The requested value does not exist on this solution (for example a
   * trajectory on an unsolvable run).
   */
  IrlqStatus_Unavailable = 5,
} IrlqStatus;

/**
 * Opaque problem handle.
 */
typedef struct IrlqProblem IrlqProblem;

/**
 * Opaque solution handle holding the report and, when produced, the
 * simulated trajectory.
 */
typedef struct IrlqSolution IrlqSolution;

/**
 * Solver tolerances; obtain defaults from [`irlq_tolerances_default`].
 */
typedef struct {
  double rank;
  double gamma;
  double range;
} IrlqTolerances;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread; the pointer stays
 * valid until the next failing call on the same thread.
 */
const char *irlq_last_error_message(void);

/**
 * Default tolerances (rank 1e-9, gamma 1e-6, range 1e-8).
 */
IrlqTolerances irlq_tolerances_default(void);

/**
 * Parse a problem from a JSON document (same schema as the CLI files).
 *
 * # Safety
 * `json` must be a valid NUL-terminated C string and `out` a valid pointer.
 */
IrlqStatus irlq_problem_from_json(const char *json, IrlqProblem **out);

/**
 * Build a named fixture ("E1" or "E2") with the given grid resolution
 * (0 selects the default of 1000 cells).
 *
 * # Safety
 * `name` must be a valid NUL-terminated C string and `out` a valid pointer.
 */
IrlqStatus irlq_problem_fixture(const char *name, uintptr_t steps, IrlqProblem **out);

/**
 * Serialize a problem back to canonical JSON.
 *
 * # Safety
 * `problem` must be a live handle from this library; `out` must be valid.
 */
IrlqStatus irlq_problem_to_json(const IrlqProblem *problem, char **out);

/**
 * Release a problem handle. Null is ignored.
 *
 * # Safety
 * `problem` must be null or a live handle from this library, not yet freed.
 */
void irlq_problem_free(IrlqProblem *problem);

/**
 * Classify a problem: `is_regular` receives the verdict and `m0` the rank
 * of the control weight.
 *
 * # Safety
 * All pointers must be valid; `problem` must be a live handle.
 */
IrlqStatus irlq_classify(const IrlqProblem *problem,
                         IrlqTolerances tolerances,
                         bool *is_regular,
                         uintptr_t *m0);

/**
 * Run the full pipeline. On `Ok` and `Unsolvable` a solution handle is
 * written to `out`; on other statuses nothing is produced.
 *
 * # Safety
 * All pointers must be valid; `problem` must be a live handle.
 */
IrlqStatus irlq_solve(const IrlqProblem *problem,
                      IrlqMode mode,
                      IrlqTolerances tolerances,
                      IrlqSolution **out);

/**
 * Whether the run produced a certified controller.
 *
 * # Safety
 * `solution` must be a live handle; `out` must be valid.
 */
IrlqStatus irlq_solution_solved(const IrlqSolution *solution, bool *out);

/**
 * Achieved cost, when a controller was produced.
 *
 * # Safety
 * `solution` must be a live handle; `out` must be valid.
 */
IrlqStatus irlq_solution_cost(const IrlqSolution *solution, double *out);

/**
 * Machine-readable report (JSON), identical to the CLI sidecar.
 *
 * # Safety
 * `solution` must be a live handle; `out` must be valid.
 */
IrlqStatus irlq_solution_report_json(const IrlqSolution *solution, char **out);

/**
 * Human-readable report, identical to the CLI text output.
 *
 * # Safety
 * `solution` must be a live handle; `out` must be valid.
 */
IrlqStatus irlq_solution_report_text(const IrlqSolution *solution, char **out);

/**
 * Simulated trajectory as CSV (same layout as the CLI artifact).
 *
 * # Safety
 * `solution` must be a live handle; `out` must be valid.
 */
IrlqStatus irlq_solution_trajectory_csv(const IrlqSolution *solution, char **out);

/**
 * Release a solution handle. Null is ignored.
 *
 * # Safety
 * `solution` must be null or a live handle from this library, not yet freed.
 */
void irlq_solution_free(IrlqSolution *solution);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `text` must be null or a pointer previously returned through one of the
 * `out` string parameters, not yet freed.
 */
void irlq_string_free(char *text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IRLQ_H */
