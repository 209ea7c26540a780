#ifndef PD_FFI_H
#define PD_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdStatus {
  PD_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8 or a buffer of the wrong size.
   */
  PD_STATUS_INVALID_ARGUMENT = 1,
  PD_STATUS_CONFIG_ERROR = 2,
  PD_STATUS_INSTABILITY = 3,
  PD_STATUS_IO_ERROR = 4,
  /**
   * A panic was caught at the boundary.
   */
  PD_STATUS_INTERNAL = 5,
} PdStatus;

/**
 * Opaque handle owning one simulation.
 */
typedef struct PdSimulation PdSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays valid until the
 * next failing call on the same thread.
 */
const char *pd_last_error_message(void);

/**
 * Builds a simulation from TOML configuration text.
 *
 * # Safety
 * `config_text` must be a nul-terminated string and `out` a valid place for a pointer.
 */
enum PdStatus pd_simulation_from_config(const char *config_text,
                                        bool full_scale,
                                        struct PdSimulation **out);

/**
 * Builds a simulation from a built-in scenario (`plate2d`, `block3d` or `crack2d`).
 *
 * # Safety
 * `name` must be a nul-terminated string and `out` a valid place for a pointer.
 */
enum PdStatus pd_simulation_from_preset(const char *name,
                                        bool full_scale,
                                        struct PdSimulation **out);

/**
 * Releases a simulation. Null is ignored.
 *
 * # Safety
 * `sim` must come from one of the constructors and not have been freed already.
 */
void pd_simulation_free(struct PdSimulation *sim);

/**
 * Takes up to `steps` steps, stopping at the configured step count. The number taken is
 * stored in `taken` when it is not null.
 *
 * # Safety
 * `sim` must be a live handle; `taken` must be null or valid for writes.
 */
enum PdStatus pd_simulation_advance(struct PdSimulation *sim, uintptr_t steps, uintptr_t *taken);

/**
 * Runs all remaining steps.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum PdStatus pd_simulation_run(struct PdSimulation *sim);

/**
 * # Safety
 * `sim` must be null or a live handle.
 */
uintptr_t pd_simulation_point_count(const struct PdSimulation *sim);

/**
 * Spatial dimension (2 or 3); 0 for a null handle.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
uint32_t pd_simulation_dim(const struct PdSimulation *sim);

/**
 * # Safety
 * `sim` must be null or a live handle.
 */
double pd_simulation_time(const struct PdSimulation *sim);

/**
 * # Safety
 * `sim` must be null or a live handle.
 */
uintptr_t pd_simulation_steps_done(const struct PdSimulation *sim);

/**
 * Copies displacements, `dim` values per point, into `out` of length `len`.
 *
 * # Safety
 * `sim` must be a live handle and `out` valid for `len` writes.
 */
enum PdStatus pd_simulation_copy_displacement(const struct PdSimulation *sim,
                                              double *out,
                                              uintptr_t len);

/**
 * Copies the damage index of every point into `out` of length `len`.
 *
 * # Safety
 * `sim` must be a live handle and `out` valid for `len` writes.
 */
enum PdStatus pd_simulation_copy_damage(const struct PdSimulation *sim, double *out, uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PD_FFI_H */
