#ifndef BENARD_MIX_H
#define BENARD_MIX_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BmixStatus {
  BMIX_STATUS_OK = 0,
  BMIX_STATUS_NULL_POINTER = 1,
  BMIX_STATUS_INVALID_UTF8 = 2,
  BMIX_STATUS_CONFIG = 3,
  BMIX_STATUS_INVALID_ARGUMENT = 4,
  BMIX_STATUS_NUMERICAL = 5,
  BMIX_STATUS_IO = 6,
  BMIX_STATUS_BUFFER_TOO_SMALL = 7,
  BMIX_STATUS_PANIC = 8,
} BmixStatus;

/**
 * Validated run configuration.
 */
typedef struct BmixConfig BmixConfig;

/**
 * One chain of the time-one map, with its stepper and noise basis.
 */
typedef struct BmixSimulator BmixSimulator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Owned by the library;
 * valid until the next call on the same thread.
 */
const char *bmix_last_error(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void bmix_string_free(char *s);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum BmixStatus bmix_config_default(struct BmixConfig **out);

/**
 * Parses and validates TOML configuration text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` valid for a pointer write.
 */
enum BmixStatus bmix_config_parse(const char *toml, struct BmixConfig **out);

/**
 * Hex hash of the configuration; free with `bmix_string_free`.
 *
 * # Safety
 * `cfg` must be a live handle; `out` valid for a pointer write.
 */
enum BmixStatus bmix_config_hash(const struct BmixConfig *cfg, char **out);

/**
 * Overrides the noise seed.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum BmixStatus bmix_config_set_seed(struct BmixConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, freed once.
 */
void bmix_config_free(struct BmixConfig *cfg);

/**
 * Runs an experiment by name (`simulate`, `mix`, `control`, `adjoint-check`,
 * `stokes-validate`, `noise-validate`, `dissipativity`). `out_dir` may be
 * null; otherwise artifacts are written there. The report JSON goes to
 * `report_json` (free with `bmix_string_free`) and the gate result to
 * `passed`.
 *
 * # Safety
 * `cfg` must be a live handle, `kind` and a non-null `out_dir` NUL-terminated
 * strings, and `report_json`, `passed` valid for writes.
 */
enum BmixStatus bmix_run_experiment(const struct BmixConfig *cfg,
                                    const char *kind,
                                    const char *out_dir,
                                    char **report_json,
                                    bool *passed);

/**
 * Creates a chain started from `init` (`conduction`, `random:R` or
 * `checkpoint:PATH`; null means conduction).
 *
 * # Safety
 * `cfg` must be a live handle, `init` null or NUL-terminated, `out` valid
 * for a pointer write.
 */
enum BmixStatus bmix_simulator_new(const struct BmixConfig *cfg,
                                   const char *init,
                                   struct BmixSimulator **out);

/**
 * Advances the chain by `units` unit time intervals.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum BmixStatus bmix_simulator_advance(struct BmixSimulator *sim, uint64_t units);

/**
 * Number of completed unit steps.
 *
 * # Safety
 * `sim` must be a live handle; `k` valid for a write.
 */
enum BmixStatus bmix_simulator_step_index(const struct BmixSimulator *sim, uint64_t *k);

/**
 * Grid shape: `n1`, `n2` and the number of planes `n3 + 1`.
 *
 * # Safety
 * `sim` must be a live handle; the outputs valid for writes.
 */
enum BmixStatus bmix_simulator_shape(const struct BmixSimulator *sim,
                                     size_t *n1,
                                     size_t *n2,
                                     size_t *planes);

/**
 * Copies the temperature into `buf`, plane by plane, `x1` fastest:
 * `buf[(j * n2 + i2) * n1 + i1]`.
 *
 * # Safety
 * `sim` must be a live handle and `buf` valid for `len` writes.
 */
enum BmixStatus bmix_simulator_temperature(const struct BmixSimulator *sim,
                                           double *buf,
                                           size_t len);

/**
 * H1 norm of the perturbation from conduction.
 *
 * # Safety
 * `sim` must be a live handle; `norm` valid for a write.
 */
enum BmixStatus bmix_simulator_h1_norm(const struct BmixSimulator *sim, double *norm);

/**
 * # Safety
 * `sim` must be null or a handle from this library, freed once.
 */
void bmix_simulator_free(struct BmixSimulator *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BENARD_MIX_H */
