#ifndef KDSM_H
#define KDSM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Prompt-to-group assignment used by [`kdsm_model_infer`].
 */
typedef enum KdsmAssign {
  KDSM_ASSIGN_MAX = 0,
  KDSM_ASSIGN_GREEDY = 1,
} KdsmAssign;

/*
 Result codes.
 */
typedef enum KdsmStatus {
  KDSM_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  KDSM_STATUS_NULL_ARGUMENT = 1,
  /*
   Invalid configuration, usage or capacity.
   */
  KDSM_STATUS_CONFIG = 2,
  /*
   Bad input data, shapes or lookups.
   */
  KDSM_STATUS_DATA = 3,
  /*
   Non-finite numerics.
   */
  KDSM_STATUS_NUMERIC = 4,
  /*
   File could not be read or written.
   */
  KDSM_STATUS_IO = 5,
  /*
   Malformed, truncated, corrupted or wrong-version file.
   */
  KDSM_STATUS_FORMAT = 6,
  /*
   Internal panic caught at the boundary.
   */
  KDSM_STATUS_PANIC = 7,
} KdsmStatus;

/*
 Opaque model handle.
 */
typedef struct KdsmModel KdsmModel;

/*
 One located keypoint, in input-image pixels.
 */
typedef struct KdsmKeypoint {
  double x;
  double y;
  double score;
  /*
   Heatmap group, or -1 (baseline model or unassigned prompt).
   */
  int64_t group;
  /*
   1 when the prediction is usable, 0 otherwise.
   */
  int32_t valid;
} KdsmKeypoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread (empty after a success).
 The pointer stays valid until the next call on the same thread.
 */
const char *kdsm_last_error(void);

/*
 Loads a checkpoint file into a new handle written to `*out`.

 # Safety
 `path` must be a nul-terminated string; `out` must be writable.
 */
enum KdsmStatus kdsm_model_load(const char *path, struct KdsmModel **out);

/*
 Releases a handle; null is ignored.

 # Safety
 `model` must come from [`kdsm_model_load`] and not be freed twice.
 */
void kdsm_model_free(struct KdsmModel *model);

/*
 Prompt capacity `K` of the model.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum KdsmStatus kdsm_model_capacity(const struct KdsmModel *model, size_t *out);

/*
 Writes 1 for a KDSM model, 0 for a baseline model.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum KdsmStatus kdsm_model_is_kdsm(const struct KdsmModel *model, int32_t *out);

/*
 Locates `n_prompts` keypoints on a `height x width` grayscale image
 (row-major, values in [0, 1]). Each prompt is `"species:category"`.
 Writes `n_prompts` entries to `out`.

 # Safety
 `image` must hold `height * width` doubles, `prompts` `n_prompts`
 nul-terminated strings, and `out` room for `n_prompts` keypoints.
 */
enum KdsmStatus kdsm_model_infer(const struct KdsmModel *model,
                                 const double *image,
                                 size_t height,
                                 size_t width,
                                 const char *const *prompts,
                                 size_t n_prompts,
                                 enum KdsmAssign assign,
                                 struct KdsmKeypoint *out);

/*
 Greedy one-to-one assignment of a row-major `rows x cols` score
 matrix; `out[k]` is the chosen column or -1.

 # Safety
 `p` must hold `rows * cols` doubles and `out` room for `rows` values.
 */
enum KdsmStatus kdsm_greedy_assign(const double *p, size_t rows, size_t cols, int64_t *out);

/*
 First maximum of every row.

 # Safety
 As [`kdsm_greedy_assign`].
 */
enum KdsmStatus kdsm_max_assign(const double *p, size_t rows, size_t cols, int64_t *out);

/*
 PCK of `n` keypoints (interleaved x, y). Writes NaN when no keypoint is
 visible. `bbox` is `[x0, y0, x1, y1]`.

 # Safety
 Coordinate arrays must hold `2 * n` doubles, flag arrays `n` bytes and
 `bbox` four doubles.
 */
enum KdsmStatus kdsm_pck(const double *pred_xy,
                         const uint8_t *pred_valid,
                         const double *gt_xy,
                         const uint8_t *gt_visible,
                         size_t n,
                         const double *bbox,
                         double threshold,
                         double *out);

/*
 NME (x100) of `n` keypoints; NaN when no keypoint is visible.

 # Safety
 As [`kdsm_pck`].
 */
enum KdsmStatus kdsm_nme(const double *pred_xy,
                         const uint8_t *pred_valid,
                         const double *gt_xy,
                         const uint8_t *gt_visible,
                         size_t n,
                         const double *bbox,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDSM_H */
