/* C interface to the mdam nonresponse modeling library. */

#ifndef MDAM_H
#define MDAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define MDAM_OK 0

#define MDAM_ERR_VALIDATION 2

#define MDAM_ERR_IO 3

#define MDAM_ERR_NUMERIC 4

/**
 * Null pointer, bad UTF-8, or an argument outside its domain.
 */
#define MDAM_ERR_ARGUMENT 5

/**
 * Sentinel for "use the seed from the configuration file".
 */
#define MDAM_SEED_FROM_CONFIG UINT64_MAX

/**
 * Opaque handle: a parsed run configuration.
 */
typedef struct MdamConfig MdamConfig;

/**
 * Opaque handle: a completed fit (chains plus model metadata).
 */
typedef struct MdamFit MdamFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *mdam_version(void);

/**
 * Message for the most recent error on this thread. Valid until the next
 * failing call on the same thread.
 */
const char *mdam_last_error(void);

/**
 * Parse a TOML run configuration. Returns null on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string pointer.
 */
struct MdamConfig *mdam_config_load(const char *path);

/**
 * # Safety
 * `cfg` must be a pointer from `mdam_config_load`, not yet freed.
 */
void mdam_config_free(struct MdamConfig *cfg);

/**
 * Identification check for the configured model and margins. Writes the
 * free-parameter count, the margin budget and 1/0 for identified into the
 * out-pointers.
 *
 * # Safety
 * `cfg` must be a live handle; out-pointers must be writable or null.
 */
int32_t mdam_identify(const struct MdamConfig *cfg,
                      int32_t *free_parameters,
                      int32_t *margin_budget,
                      int32_t *identified);

/**
 * Run the configured simulation, writing dataset, truth and estimand files
 * into `out_dir`.
 *
 * # Safety
 * `cfg` must be a live handle; `out_dir` a valid string pointer.
 */
int32_t mdam_simulate(const struct MdamConfig *cfg, const char *out_dir, uint64_t seed);

/**
 * Fit the configured model, writing draws and reports into `out_dir`.
 * `seed = MDAM_SEED_FROM_CONFIG` and `chains = 0` defer to the config;
 * nonzero `force` fits past an overparameterized identification verdict.
 * Returns null on failure.
 *
 * # Safety
 * `cfg` must be a live handle; `out_dir` a valid string pointer.
 */
struct MdamFit *mdam_fit_run(const struct MdamConfig *cfg,
                             const char *out_dir,
                             uint64_t seed,
                             uint32_t chains,
                             int32_t force);

/**
 * # Safety
 * `fit` must be a pointer from `mdam_fit_run`, not yet freed.
 */
void mdam_fit_free(struct MdamFit *fit);

/**
 * Total retained draws across chains.
 *
 * # Safety
 * `fit` must be a live handle.
 */
uintptr_t mdam_fit_num_draws(const struct MdamFit *fit);

/**
 * Monotone-pattern violations observed across retained draws (always 0 for
 * a valid fit).
 *
 * # Safety
 * `fit` must be a live handle; `out` writable.
 */
int32_t mdam_fit_monotone_violations(const struct MdamFit *fit, uint64_t *out);

/**
 * Posterior mean and central 95% interval for `target` (e.g. "vote=1")
 * within `subgroup` (e.g. "state=FL & sex=F"; empty string for all
 * records).
 *
 * # Safety
 * `fit` must be a live handle; strings valid; out-pointers writable.
 */
int32_t mdam_fit_estimand(const struct MdamFit *fit,
                          const char *target,
                          const char *subgroup,
                          double *mean,
                          double *lo,
                          double *hi);

/**
 * Posterior mean of a named coefficient (names as in the draws file
 * header, e.g. "U:age=30-49").
 *
 * # Safety
 * `fit` must be a live handle; `name` valid; `out` writable.
 */
int32_t mdam_fit_coeff_mean(const struct MdamFit *fit, const char *name, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDAM_H */
