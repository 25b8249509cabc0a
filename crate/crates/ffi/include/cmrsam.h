#ifndef CMRSAM_H
#define CMRSAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  CMR_STATUS_OK = 0,
  CMR_STATUS_NULL_POINTER = 1,
  CMR_STATUS_INVALID_ARGUMENT = 2,
  CMR_STATUS_IO = 3,
  CMR_STATUS_FORMAT = 4,
  CMR_STATUS_DIMENSION_MISMATCH = 5,
  CMR_STATUS_NON_FINITE = 6,
  CMR_STATUS_BUFFER_TOO_SMALL = 7,
  CMR_STATUS_PANIC = 8,
} CmrStatus;

typedef enum {
  /**
   * Prompted models use the clip's own view.
   */
  CMR_VIEW_AUTO = 0,
  CMR_VIEW_SAX = 1,
  CMR_VIEW_LAX = 2,
} CmrView;

typedef enum {
  CMR_SLICE_NOT_APPLICABLE = 0,
  CMR_SLICE_BASAL = 1,
  CMR_SLICE_MID = 2,
  CMR_SLICE_APICAL = 3,
} CmrSlice;

/**
 * An image clip with its ground-truth mask.
 */
typedef struct CmrClip CmrClip;

/**
 * A predicted mask.
 */
typedef struct CmrMask CmrMask;

/**
 * A trained model restored from a checkpoint.
 */
typedef struct CmrModel CmrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cmr_version(void);

/**
 * Static description of a status code.
 */
const char *cmr_status_message(CmrStatus status);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * NUL-terminated when `len > 0`). Returns the full message length in bytes,
 * excluding the terminator.
 */
size_t cmr_last_error(char *buf, size_t len);

CmrStatus cmr_model_load(const char *path, CmrModel **out);

void cmr_model_free(CmrModel *model);

/**
 * Whether the model was trained with view prompts.
 */
CmrStatus cmr_model_is_prompted(const CmrModel *model, bool *out);

/**
 * Frozen and trainable scalar parameter counts.
 */
CmrStatus cmr_model_parameter_counts(const CmrModel *model, size_t *frozen, size_t *trainable);

CmrStatus cmr_clip_load(const char *path, CmrClip **out);

/**
 * Builds a clip from `height * width * phases` intensities in row-major
 * `(row, col, phase)` order. The ground-truth mask is all zeros.
 */
CmrStatus cmr_clip_new(size_t height,
                       size_t width,
                       size_t phases,
                       const float *data,
                       size_t ed_index,
                       size_t es_index,
                       CmrView view,
                       CmrClip **out);

/**
 * A seeded synthetic clip with its exact mask.
 */
CmrStatus cmr_clip_phantom(CmrView view,
                           CmrSlice slice,
                           size_t height,
                           size_t width,
                           size_t phases,
                           uint64_t seed,
                           CmrClip **out);

void cmr_clip_free(CmrClip *clip);

CmrStatus cmr_clip_dims(const CmrClip *clip, size_t *height, size_t *width, size_t *phases);

/**
 * Copies the clip's ground-truth mask (`height * width * phases` bytes).
 */
CmrStatus cmr_clip_mask(const CmrClip *clip, uint8_t *buf, size_t len);

/**
 * Segments `clip`. The result has the clip's geometry.
 */
CmrStatus cmr_segment(const CmrModel *model, const CmrClip *clip, CmrView view, CmrMask **out);

void cmr_mask_free(CmrMask *mask);

/**
 * Number of voxels (`height * width * phases`) in a predicted mask.
 */
CmrStatus cmr_mask_len(const CmrMask *mask, size_t *out);

/**
 * True when a view was requested from a model trained without prompts.
 */
CmrStatus cmr_mask_prompt_ignored(const CmrMask *mask, bool *out);

CmrStatus cmr_mask_copy(const CmrMask *mask, uint8_t *buf, size_t len);

/**
 * Dice overlap of two binary masks of `n` voxels; two empty masks score 1.
 */
CmrStatus cmr_dice(const uint8_t *pred, const uint8_t *gt, size_t n, double *out);

/**
 * Boundary Hausdorff distance in pixels between two `height x width`
 * frames. NaN when either frame is empty.
 */
CmrStatus cmr_hausdorff(const uint8_t *pred,
                        const uint8_t *gt,
                        size_t height,
                        size_t width,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMRSAM_H */
