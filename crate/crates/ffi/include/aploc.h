#ifndef APLOC_H
#define APLOC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. The non-zero values match the `aploc` CLI exit codes.
 */
typedef enum AplocStatus {
  APLOC_STATUS_OK = 0,
  /**
   * Invalid parameter, dimension mismatch or null pointer.
   */
  APLOC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The solver hit a degenerate or numerically singular problem.
   */
  APLOC_STATUS_SOLVER = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  APLOC_STATUS_INTERNAL = 5,
} AplocStatus;

typedef enum AplocOrientation {
  APLOC_ORIENTATION_FIXED = 0,
  APLOC_ORIENTATION_FREE = 1,
} AplocOrientation;

typedef enum AplocMethod {
  APLOC_METHOD_AP = 0,
  APLOC_METHOD_RAP_MUSIC = 1,
  APLOC_METHOD_TRAP_MUSIC = 2,
  APLOC_METHOD_RAP_BEAMFORMER = 3,
} AplocMethod;

/**
 * Opaque sensor array plus source grid.
 */
typedef struct AplocModel AplocModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *aploc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aploc_version(void);

/**
 * Builds a ring array of radial magnetometers and a cubic source grid.
 * Lengths are in meters.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one pointer.
 */
enum AplocStatus aploc_model_new(size_t n_rings,
                                 size_t sensors_per_ring,
                                 double shell_radius,
                                 double head_radius,
                                 double grid_spacing,
                                 enum AplocOrientation orientation,
                                 struct AplocModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a pointer from [`aploc_model_new`] not yet freed.
 */
void aploc_model_free(struct AplocModel *model);

/**
 * # Safety
 * `model` must be a live handle and `n_sensors`, `n_points` writable.
 */
enum AplocStatus aploc_model_dims(const struct AplocModel *model,
                                  size_t *n_sensors,
                                  size_t *n_points);

/**
 * Writes grid point `index` (meters) to `xyz[0..3]`.
 *
 * # Safety
 * `model` must be a live handle and `xyz` point to 3 writable doubles.
 */
enum AplocStatus aploc_model_point(const struct AplocModel *model, size_t index, double *xyz);

/**
 * Writes the fixed-orientation topography of point `index` to
 * `out[0..n_sensors]`.
 *
 * # Safety
 * `model` must be a live handle and `out` point to `n_sensors` writable doubles.
 */
enum AplocStatus aploc_model_topography(const struct AplocModel *model, size_t index, double *out);

/**
 * Localizes `n_sources` dipoles in a row-major `n_sensors × n_samples`
 * recording. Writes grid indices to `indices[0..n_sources]` and unit
 * moments to `orientations[0..3*n_sources]`; `orientations` may be NULL.
 *
 * # Safety
 * `data` must hold `n_sensors * n_samples` doubles; `indices` and (when
 * non-NULL) `orientations` must be writable for the stated lengths.
 */
enum AplocStatus aploc_localize(const struct AplocModel *model,
                                enum AplocMethod method,
                                const double *data,
                                size_t n_sensors,
                                size_t n_samples,
                                size_t n_sources,
                                size_t *indices,
                                double *orientations);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APLOC_H */
