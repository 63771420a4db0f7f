/* C interface to the roundabout CAV microsimulator. */

#ifndef ROUNDABOUT_H
#define ROUNDABOUT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by fallible entry points.
 */
typedef enum rb_status {
  RB_OK = 0,
  RB_ERR_NULL_ARG = 1,
  RB_ERR_UTF8 = 2,
  RB_ERR_CONFIG = 3,
  RB_ERR_RUNTIME = 4,
  RB_ERR_NOT_RUN = 5,
} rb_status;

/**
 * Opaque simulation handle.
 */
typedef struct rb_simulation rb_simulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the last error message on this thread as a newly allocated string,
 * or null if none. Free with `rb_string_free`.
 */
char *rb_last_error_message(void);

/**
 * Creates a simulation from a TOML scenario document. Missing keys take
 * their defaults; unknown keys are rejected. Returns null on error.
 */
struct rb_simulation *rb_simulation_new_from_toml(const char *config_toml);

/**
 * Creates a simulation with the default scenario.
 */
struct rb_simulation *rb_simulation_new_default(void);

/**
 * Runs the simulation to completion. Idempotent: a second call reruns and
 * replaces the stored result.
 */
enum rb_status rb_simulation_run(struct rb_simulation *sim);

/**
 * Returns the run summary (with per-trip records) as a JSON string, or null
 * if the simulation has not been run. Free with `rb_string_free`.
 */
char *rb_simulation_summary_json(const struct rb_simulation *sim);

/**
 * Returns the per-step trajectory table as CSV text, or null if the
 * simulation has not been run. Free with `rb_string_free`.
 */
char *rb_simulation_trajectory_csv(const struct rb_simulation *sim);

/**
 * Frees a string returned by this library. Null is a no-op.
 */
void rb_string_free(char *s);

/**
 * Frees a simulation handle. Null is a no-op.
 */
void rb_simulation_free(struct rb_simulation *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROUNDABOUT_H */
