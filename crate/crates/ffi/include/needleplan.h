#ifndef NEEDLEPLAN_H
#define NEEDLEPLAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum NpStatus {
  NP_STATUS_OK = 0,
  NP_STATUS_NULL_POINTER = 1,
  NP_STATUS_INVALID_ARGUMENT = 2,
  NP_STATUS_IO = 3,
  NP_STATUS_FORMAT = 4,
  NP_STATUS_TARGET_OUTSIDE_BODY = 5,
  NP_STATUS_NO_FEASIBLE_ENTRY = 6,
  NP_STATUS_BUFFER_TOO_SMALL = 7,
  NP_STATUS_INTERNAL = 8,
} NpStatus;

/**
 * Entry-point heat map for one target.
 */
typedef struct NpHeatMap NpHeatMap;

/**
 * Arm, obstacles and base placement.
 */
typedef struct NpScene NpScene;

/**
 * CT volume with its body mask and skin surface.
 */
typedef struct NpVolume NpVolume;

/**
 * Segmentation settings used when a volume is loaded.
 */
typedef struct NpSegmentOptions {
  int16_t skin_threshold_hu;
  double closing_radius_mm;
  /**
   * Non-zero halves the lattice first.
   */
  int32_t downsample;
} NpSegmentOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *np_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t np_last_error_message(char *buf, size_t len);

struct NpSegmentOptions np_segment_options_default(void);

/**
 * Loads an NRRD volume and segments the body.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `options` null or valid, and
 * `out` a valid pointer to receive the handle.
 */
enum NpStatus np_volume_load(const char *path,
                             const struct NpSegmentOptions *options,
                             struct NpVolume **out);

/**
 * Lattice size in voxels (`dims[3]`) and spacing in mm (`spacing[3]`);
 * either output may be null.
 *
 * # Safety
 * `volume` must come from [`np_volume_load`]; outputs hold three values.
 */
enum NpStatus np_volume_dims(const struct NpVolume *volume, size_t *dims, double *spacing);

/**
 * Number of skin surface vertices.
 *
 * # Safety
 * `volume` must be null or come from [`np_volume_load`].
 */
size_t np_volume_skin_vertex_count(const struct NpVolume *volume);

/**
 * # Safety
 * `volume` must be null or come from [`np_volume_load`], freed once.
 */
void np_volume_free(struct NpVolume *volume);

/**
 * Builds the heat map for `target[3]`. `params_json` may be null for the
 * defaults; `workers` of 0 or 1 runs serially.
 *
 * # Safety
 * Pointers must be valid as described; `out` receives the handle.
 */
enum NpStatus np_heatmap_build(const struct NpVolume *volume,
                               const double *target,
                               const char *params_json,
                               size_t workers,
                               struct NpHeatMap **out);

/**
 * Number of heat-map vertices.
 *
 * # Safety
 * `heatmap` must be null or a live handle.
 */
size_t np_heatmap_vertex_count(const struct NpHeatMap *heatmap);

/**
 * Per-vertex quality (normalised cost in [0, 1] or a class sentinel
 * above 1) into `out[len]`.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum NpStatus np_heatmap_quality(const struct NpHeatMap *heatmap, double *out, size_t len);

/**
 * Optimal entry vertex and its position (`position[3]`, may be null).
 *
 * # Safety
 * Pointers must be valid as described.
 */
enum NpStatus np_heatmap_optimal(const struct NpHeatMap *heatmap, size_t *vertex, double *position);

/**
 * Writes the heat map as PLY plus its JSON sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum NpStatus np_heatmap_save(const struct NpHeatMap *heatmap, const char *path);

/**
 * # Safety
 * `heatmap` must be null or a live handle, freed once.
 */
void np_heatmap_free(struct NpHeatMap *heatmap);

/**
 * Loads a scene file. If the file names no body mesh, the skin of
 * `volume` is used (which must then be non-null).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` receives the handle.
 */
enum NpStatus np_scene_load(const char *path, const struct NpVolume *volume, struct NpScene **out);

/**
 * # Safety
 * `scene` must be null or a live handle, freed once.
 */
void np_scene_free(struct NpScene *scene);

/**
 * Grid reachability pass: marks unreachable cells in place and moves the
 * optimum to a reachable vertex. `grid_mm <= 0` uses the heat map's own
 * grid size.
 *
 * # Safety
 * Both handles must be live.
 */
enum NpStatus np_heatmap_apply_reachability(struct NpHeatMap *heatmap,
                                            const struct NpScene *scene,
                                            double grid_mm,
                                            size_t workers);

/**
 * 3D and lateral deviation of a placed needle.
 *
 * # Safety
 * Points hold three doubles; outputs may be null.
 */
enum NpStatus np_placement_report(const double *target,
                                  const double *entry,
                                  const double *tip,
                                  double *dev_3d_mm,
                                  double *dev_lateral_mm);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEEDLEPLAN_H */
