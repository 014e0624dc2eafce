#ifndef LDP_H
#define LDP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. The numeric values of the first four
 * match the command-line exit codes.
 */
typedef enum LdpStatus {
  LDP_STATUS_OK = 0,
  LDP_STATUS_VALIDATION = 1,
  LDP_STATUS_NUMERICAL = 2,
  LDP_STATUS_IO = 3,
  LDP_STATUS_NULL_POINTER = 4,
  LDP_STATUS_INVALID_UTF8 = 5,
  LDP_STATUS_OUT_OF_RANGE = 6,
  LDP_STATUS_PANIC = 7,
} LdpStatus;

/**
 * Pose error metrics of one comparison.
 */
typedef struct LdpMetrics LdpMetrics;

/**
 * A parsed, validated scenario.
 */
typedef struct LdpScenario LdpScenario;

/**
 * A finished rollout, possibly cut short by a numerical failure.
 */
typedef struct LdpSimulation LdpSimulation;

/**
 * Plain copy of the metric values.
 */
typedef struct LdpMetricValues {
  /**
   * Meters.
   */
  double mpjpe;
  double hip_ade;
  double hip_fde;
  double mble;
  /**
   * Centimeters per frame.
   */
  double fse;
} LdpMetricValues;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *ldp_last_error(void);

/**
 * Library version, a static string.
 */
const char *ldp_version(void);

/**
 * Release a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void ldp_string_free(char *s);

/**
 * Parse a scenario from TOML text.
 *
 * # Safety
 * `toml` must be a valid C string; `out` must be writable.
 */
enum LdpStatus ldp_scenario_from_toml(const char *toml, struct LdpScenario **out);

/**
 * One of the bundled scenarios by name.
 *
 * # Safety
 * `name` must be a valid C string; `out` must be writable.
 */
enum LdpStatus ldp_scenario_bundled(const char *name, struct LdpScenario **out);

/**
 * Number of agents, or 0 for a null handle.
 *
 * # Safety
 * `scenario` must be null or a live handle.
 */
size_t ldp_scenario_agent_count(const struct LdpScenario *scenario);

/**
 * # Safety
 * `scenario` must be null or a live handle, not used afterwards.
 */
void ldp_scenario_free(struct LdpScenario *scenario);

/**
 * Roll out `scenario` with fresh models drawn from `seed`.
 *
 * A numerical failure during the rollout still yields a simulation holding
 * the completed frames; the status is then [`LdpStatus::Numerical`].
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum LdpStatus ldp_simulate(const struct LdpScenario *scenario,
                            uint64_t seed,
                            struct LdpSimulation **out);

/**
 * Number of recorded frames, or 0 for a null handle.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
size_t ldp_simulation_frames(const struct LdpSimulation *sim);

/**
 * # Safety
 * `sim` must be null or a live handle.
 */
size_t ldp_simulation_agents(const struct LdpSimulation *sim);

/**
 * Copy `[x, y, θ, φ, ẋ, ẏ, θ̇, φ̇]` of one agent at one frame into `out`.
 *
 * # Safety
 * `sim` must be a live handle; `out` must point to 8 writable doubles.
 */
enum LdpStatus ldp_simulation_state(const struct LdpSimulation *sim,
                                    size_t frame,
                                    size_t agent,
                                    double *out);

/**
 * The trajectory in the command-line CSV format. Free with
 * [`ldp_string_free`]. Null on failure.
 *
 * # Safety
 * `sim` must be a live handle.
 */
char *ldp_simulation_to_csv(const struct LdpSimulation *sim);

/**
 * # Safety
 * `sim` must be null or a live handle, not used afterwards.
 */
void ldp_simulation_free(struct LdpSimulation *sim);

/**
 * Compare two pose CSV texts (`frame,agent,joint,x,y,z`) with the default
 * skeleton. `foot_height` is in meters.
 *
 * # Safety
 * Both texts must be valid C strings; `out` must be writable.
 */
enum LdpStatus ldp_metrics_evaluate(const char *pred_csv,
                                    const char *gt_csv,
                                    double foot_height,
                                    struct LdpMetrics **out);

/**
 * # Safety
 * `metrics` must be a live handle; `out` must be writable.
 */
enum LdpStatus ldp_metrics_values(const struct LdpMetrics *metrics, struct LdpMetricValues *out);

/**
 * # Safety
 * `metrics` must be null or a live handle, not used afterwards.
 */
void ldp_metrics_free(struct LdpMetrics *metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LDP_H */
