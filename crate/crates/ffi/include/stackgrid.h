#ifndef STACKGRID_H
#define STACKGRID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes. Zero is success.
 */
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_UTF8 = 2,
  SG_STATUS_PARSE_ERROR = 3,
  SG_STATUS_INVALID_SCENARIO = 4,
  SG_STATUS_DIMENSION_MISMATCH = 5,
  SG_STATUS_NUMERICAL_FAILURE = 6,
  SG_STATUS_BUFFER_TOO_SMALL = 7,
  SG_STATUS_INVALID_ARGUMENT = 8,
  SG_STATUS_PANIC = 9,
} SgStatus;

/*
 Which Stackelberg solution to return.
 */
typedef enum SgRoute {
  /*
   Reduced QP, or the projected fallback off the interior.
   */
  SG_ROUTE_AUTO = 0,
  SG_ROUTE_REDUCED_QP = 1,
  SG_ROUTE_KKT_SYSTEM = 2,
} SgRoute;

typedef enum SgNashMethod {
  SG_NASH_METHOD_CLOSED_FORM = 0,
  SG_NASH_METHOD_TPBV = 1,
  SG_NASH_METHOD_BEST_RESPONSE = 2,
} SgNashMethod;

/*
 Validated, reduced scenario.
 */
typedef struct SgScenario SgScenario;

/*
 Supply, demands and prices of a solve.
 */
typedef struct SgSolution SgSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Parses and validates a scenario JSON document.

 # Safety
 `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SgStatus sg_scenario_from_json(const char *json, struct SgScenario **out);

/*
 # Safety
 `scenario` must come from [`sg_scenario_from_json`] or be null.
 */
void sg_scenario_free(struct SgScenario *scenario);

/*
 # Safety
 Pointers must be valid.
 */
enum SgStatus sg_scenario_horizon(const struct SgScenario *scenario, size_t *out);

/*
 # Safety
 Pointers must be valid.
 */
enum SgStatus sg_scenario_num_users(const struct SgScenario *scenario, size_t *out);

/*
 Solves the Stackelberg game.

 # Safety
 `scenario` must be a live handle and `out` a valid pointer.
 */
enum SgStatus sg_solve_stackelberg(const struct SgScenario *scenario,
                                   enum SgRoute route,
                                   struct SgSolution **out);

/*
 Solves the followers' game for a fixed supply of `len` slots.

 # Safety
 `supply` must point to `len` doubles; `scenario` must be live.
 */
enum SgStatus sg_solve_nash(const struct SgScenario *scenario,
                            const double *supply,
                            size_t len,
                            enum SgNashMethod method,
                            struct SgSolution **out);

/*
 # Safety
 `solution` must come from a solve call or be null.
 */
void sg_solution_free(struct SgSolution *solution);

/*
 Horizon `T`; supply has `T` entries, price `T + 1`.

 # Safety
 Pointers must be valid.
 */
enum SgStatus sg_solution_horizon(const struct SgSolution *solution, size_t *out);

/*
 # Safety
 Pointers must be valid.
 */
enum SgStatus sg_solution_num_users(const struct SgSolution *solution, size_t *out);

/*
 # Safety
 `buf` must hold `len` doubles.
 */
enum SgStatus sg_solution_supply(const struct SgSolution *solution, double *buf, size_t len);

/*
 Row-major `users x horizon`.

 # Safety
 `buf` must hold `len` doubles.
 */
enum SgStatus sg_solution_demands(const struct SgSolution *solution, double *buf, size_t len);

/*
 `T + 1` prices.

 # Safety
 `buf` must hold `len` doubles.
 */
enum SgStatus sg_solution_price(const struct SgSolution *solution, double *buf, size_t len);

/*
 # Safety
 Pointers must be valid.
 */
enum SgStatus sg_solution_leader_cost(const struct SgSolution *solution, double *out);

/*
 Writes 1 if every demand is positive (and, for Stackelberg, every supply nonnegative).

 # Safety
 Pointers must be valid.
 */
enum SgStatus sg_solution_interior(const struct SgSolution *solution, int32_t *out);

/*
 Copies the calling thread's last error message, NUL-terminated and
 truncated to `len` bytes. Returns the full message length plus one, so a
 return value greater than `len` means truncation. `buf` may be null to
 query the length.

 # Safety
 `buf` must hold `len` bytes or be null.
 */
size_t sg_last_error_message(char *buf, size_t len);

/*
 Library version, a static NUL-terminated string.
 */
const char *sg_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STACKGRID_H */
