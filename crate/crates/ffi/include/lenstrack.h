#ifndef LENSTRACK_H
#define LENSTRACK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum LtStatus {
  LT_STATUS_OK = 0,
  LT_STATUS_NULL_POINTER = 1,
  LT_STATUS_INVALID_INPUT = 2,
  LT_STATUS_NUMERICAL = 3,
  LT_STATUS_MISSING_LOS = 4,
  LT_STATUS_CONFIG = 5,
  LT_STATUS_IO = 6,
  LT_STATUS_OUT_OF_RANGE = 7,
  LT_STATUS_PANIC = 8,
} LtStatus;

// Opaque experiment configuration.
typedef struct LtConfig LtConfig;

// Opaque Monte Carlo sweep result.
typedef struct LtSweep LtSweep;

// Aggregate metrics of one SNR point. Angles in radians, distances in meters.
typedef struct LtMetrics {
  double snr_db;
  double rmse_max_p;
  double rmse_max_alpha;
  double final_rmse_p;
  double final_rmse_alpha;
  double residual_error;
  double detection_probability;
  uintptr_t n_valid;
  uintptr_t n_failed;
} LtMetrics;

// Position and rotation of the MS.
typedef struct LtPose {
  double x;
  double y;
  double alpha;
} LtPose;

// Closed-form training and tracking durations in seconds.
typedef struct LtTiming {
  double proposed;
  double exhaustive;
  double hierarchical;
  double tracking;
} LtTiming;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next call.
const char *lt_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *lt_version(void);

// Creates a configuration with default values.
//
// # Safety
// `out` must be a valid pointer; the handle must be released with [`lt_config_free`].
enum LtStatus lt_config_new_default(struct LtConfig **out);

// Parses a TOML configuration; missing keys take default values.
//
// # Safety
// `text` must be NUL-terminated; `out` must be valid.
enum LtStatus lt_config_from_toml(const char *text, struct LtConfig **out);

// Releases a configuration. Null is ignored.
//
// # Safety
// `cfg` must come from this library and not be used afterwards.
void lt_config_free(struct LtConfig *cfg);

// Sets the number of Monte Carlo trials per SNR point.
//
// # Safety
// `cfg` must be a live handle.
enum LtStatus lt_config_set_trials(struct LtConfig *cfg, uintptr_t n_trials);

// Sets the master seed.
//
// # Safety
// `cfg` must be a live handle.
enum LtStatus lt_config_set_seed(struct LtConfig *cfg, uint64_t seed);

// Sets the observation time in seconds.
//
// # Safety
// `cfg` must be a live handle.
enum LtStatus lt_config_set_observation_time(struct LtConfig *cfg, double t_ob);

// Enables or disables angular refinement of the training estimates.
//
// # Safety
// `cfg` must be a live handle.
enum LtStatus lt_config_set_refine(struct LtConfig *cfg, bool refine);

// Replaces the SNR sweep with `len` values in dB.
//
// # Safety
// `cfg` must be a live handle; `snr_db` must point to `len` values.
enum LtStatus lt_config_set_snr_sweep(struct LtConfig *cfg, const double *snr_db, uintptr_t len);

// Runs the Monte Carlo sweep described by `cfg`.
//
// # Safety
// `cfg` must be a live handle; `out` must be valid. Release the result with [`lt_sweep_free`].
enum LtStatus lt_run_sweep(const struct LtConfig *cfg, struct LtSweep **out);

// Number of SNR points in a sweep result; 0 for null.
//
// # Safety
// `sweep` must be null or a live handle.
uintptr_t lt_sweep_point_count(const struct LtSweep *sweep);

// Metrics of SNR point `index`.
//
// # Safety
// `sweep` must be a live handle; `out` must be valid.
enum LtStatus lt_sweep_metrics(const struct LtSweep *sweep, uintptr_t index, struct LtMetrics *out);

// Writes `results.csv`, `summary.csv` and `config_echo.json` into directory `dir`.
//
// # Safety
// `sweep` must be a live handle; `dir` must be NUL-terminated.
enum LtStatus lt_sweep_write_csv(const struct LtSweep *sweep, const char *dir);

// Releases a sweep result. Null is ignored.
//
// # Safety
// `sweep` must come from [`lt_run_sweep`] and not be used afterwards.
void lt_sweep_free(struct LtSweep *sweep);

// Beamspace kernel `χ_N(x)`.
//
// # Safety
// `out` must be valid.
enum LtStatus lt_chi_kernel(uintptr_t n, double x, double *out);

// CFAR stopping threshold for `n_subcarriers` observations over `n_antennas` atoms.
//
// # Safety
// `out` must be valid.
enum LtStatus lt_cfar_threshold(uintptr_t n_subcarriers,
                                uintptr_t n_antennas,
                                double p_fa,
                                double noise_psd,
                                double *out);

// MS pose from LOS delay and angles for a BS at `(qx, qy)`.
//
// # Safety
// `out` must be valid.
enum LtStatus lt_params_to_pose(double qx,
                                double qy,
                                double tau,
                                double theta,
                                double phi,
                                struct LtPose *out);

// Training and tracking durations for the given array sizes, training length and sample period.
//
// # Safety
// `out` must be valid.
enum LtStatus lt_training_time(uintptr_t n_bs,
                               uintptr_t n_ms,
                               uintptr_t g,
                               double sample_period,
                               struct LtTiming *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LENSTRACK_H */
