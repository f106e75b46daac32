#ifndef PWS_H
#define PWS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  PWS_STATUS_OK = 0,
  PWS_STATUS_NULL_POINTER = 1,
  PWS_STATUS_INVALID_INPUT = 2,
  PWS_STATUS_NON_POSITIVE_DEPTH = 3,
  PWS_STATUS_SHAPE_MISMATCH = 4,
  PWS_STATUS_DEGENERATE_INTERVAL = 5,
  PWS_STATUS_NEGATIVE_MARGIN = 6,
  PWS_STATUS_INVALID_DELTA = 7,
  PWS_STATUS_DEGENERATE_DATASET = 8,
  PWS_STATUS_DOMAIN_ERROR = 9,
  PWS_STATUS_INVALID_RANGE = 10,
  PWS_STATUS_EMPTY_FRAME = 11,
  PWS_STATUS_FORMAT_ERROR = 12,
  PWS_STATUS_SUBPROCESS_ERROR = 13,
  PWS_STATUS_IO_ERROR = 14,
  PWS_STATUS_PANIC = 15,
} PwsStatus;

typedef enum {
  PWS_SHAPE_CLASS_BILLBOARD = 0,
  PWS_SHAPE_CLASS_SPHERE_CAP = 1,
  PWS_SHAPE_CLASS_BOX_FACE = 2,
  PWS_SHAPE_CLASS_STRIPED_WALL = 3,
} PwsShapeClass;

typedef enum {
  PWS_AXIS_TX = 0,
  PWS_AXIS_TY = 1,
  PWS_AXIS_TZ = 2,
  PWS_AXIS_RX = 3,
  PWS_AXIS_RY = 4,
  PWS_AXIS_RZ = 5,
} PwsAxis;

typedef enum {
  PWS_METHOD_EXACT = 0,
  PWS_METHOD_LIPSCHITZ = 1,
  PWS_METHOD_ONE_FRAME = 2,
} PwsMethod;

typedef enum {
  PWS_VERDICT_CERTIFIED = 0,
  PWS_VERDICT_NOT_CERTIFIED = 1,
  PWS_VERDICT_ABSTAIN = 2,
} PwsVerdict;

/**
 * Opaque colored point cloud.
 */
typedef struct PwsCloud PwsCloud;

/**
 * Opaque built-in classifier.
 */
typedef struct PwsModel PwsModel;

/**
 * Opaque certification report.
 */
typedef struct PwsReport PwsReport;

/**
 * Pinhole intrinsics and image size.
 */
typedef struct {
  double fx;
  double fy;
  double cx;
  double cy;
  size_t width;
  size_t height;
} PwsCamera;

/**
 * Certification settings. `delta` is read only by the one-frame method.
 */
typedef struct {
  PwsAxis axis;
  /**
   * Metres or radians.
   */
  double radius;
  PwsMethod method;
  double sigma;
  uint64_t n_samples;
  double confidence_alpha;
  double quantile;
  size_t resolution;
  double delta;
  uint64_t seed;
} PwsCertifyOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *pws_last_error(void);

/**
 * Library version as a static string.
 */
const char *pws_version(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void pws_string_free(char *s);

/**
 * The default 64×64 camera.
 */
PwsCamera pws_camera_default(void);

/**
 * Builds a cloud from `n_points` xyz triples and `n_points * channels` colors.
 *
 * # Safety
 * `xyz` must hold `3 * n_points` doubles and `colors` `channels * n_points` floats.
 */
PwsStatus pws_cloud_new(const double *xyz,
                        const float *colors,
                        size_t n_points,
                        size_t channels,
                        PwsCloud **out_cloud);

/**
 * Reads a `.pwspc` cloud file.
 *
 * # Safety
 * `file` must be a NUL-terminated string.
 */
PwsStatus pws_cloud_read(const char *file, PwsCloud **out_cloud);

/**
 * Generates one synthetic scene for the default camera.
 *
 * # Safety
 * `out_cloud` must be writable.
 */
PwsStatus pws_scene_generate(PwsShapeClass class_, uint64_t seed, PwsCloud **out_cloud);

/**
 * Number of points, or 0 for null.
 *
 * # Safety
 * `cloud` must be null or a live handle.
 */
size_t pws_cloud_len(const PwsCloud *cloud);

/**
 * # Safety
 * `cloud` must be null or a live handle, freed once.
 */
void pws_cloud_free(PwsCloud *cloud);

/**
 * Loads a model written by `pws train`.
 *
 * # Safety
 * `file` must be a NUL-terminated string.
 */
PwsStatus pws_model_load(const char *file, PwsModel **out_model);

/**
 * # Safety
 * `model` must be null or a live handle, freed once.
 */
void pws_model_free(PwsModel *model);

/**
 * Partition spacing and frame count without certifying.
 *
 * # Safety
 * Pointers must be valid; outputs writable.
 */
PwsStatus pws_partition(const PwsCloud *cloud,
                        const PwsCamera *cam,
                        const PwsCertifyOptions *options,
                        double *out_delta_alpha,
                        size_t *out_n);

/**
 * Certifies `cloud` against motion along one axis.
 *
 * # Safety
 * Pointers must be valid; `out_report` writable.
 */
PwsStatus pws_certify(const PwsCloud *cloud,
                      const PwsModel *model,
                      const PwsCamera *cam,
                      const PwsCertifyOptions *options,
                      PwsReport **out_report);

/**
 * # Safety
 * `report` must be a live handle.
 */
PwsStatus pws_report_verdict(const PwsReport *report, PwsVerdict *out_verdict);

/**
 * Partition count, or 0 for null.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t pws_report_n(const PwsReport *report);

/**
 * Minimum radius minus maximum adjacent-frame error; NaN for null.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
double pws_report_margin(const PwsReport *report);

/**
 * Report as JSON without timing. Free the string with [`pws_string_free`].
 *
 * # Safety
 * `report` must be a live handle; `out_json` writable.
 */
PwsStatus pws_report_json(const PwsReport *report, char **out_json);

/**
 * # Safety
 * `report` must be null or a live handle, freed once.
 */
void pws_report_free(PwsReport *report);

/**
 * Standard normal quantile.
 *
 * # Safety
 * `out_value` must be writable.
 */
PwsStatus pws_gaussian_quantile(double p, double *out_value);

/**
 * One-sided Clopper–Pearson lower bound for `successes` out of `trials`; NaN when
 * the arguments are out of range.
 */
double pws_clopper_pearson_lower(uint64_t successes, uint64_t trials, double alpha);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PWS_H */
