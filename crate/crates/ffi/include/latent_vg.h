#ifndef LATENT_VG_H
#define LATENT_VG_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum LvgStatus {
  LVG_STATUS_OK = 0,
  LVG_STATUS_NULL_POINTER = 1,
  LVG_STATUS_INVALID_ARGUMENT = 2,
  LVG_STATUS_IO = 3,
  LVG_STATUS_FORMAT = 4,
  LVG_STATUS_SHAPE_MISMATCH = 5,
  LVG_STATUS_VOCAB_OVERFLOW = 6,
  LVG_STATUS_MISSING_ARTIFACT = 7,
  LVG_STATUS_PANIC = 8,
} LvgStatus;

/**
 * A loaded model.
 */
typedef struct LvgModel LvgModel;

/**
 * Inclusive pixel box.
 */
typedef struct LvgBox {
  uint32_t x_min;
  uint32_t y_min;
  uint32_t x_max;
  uint32_t y_max;
} LvgBox;

/**
 * Scalar outputs of one prediction; the mask goes to a caller buffer.
 */
typedef struct LvgPrediction {
  /**
   * Valid when `has_box` is true.
   */
  struct LvgBox bbox;
  bool has_box;
  /**
   * Whether the model has a no-target classifier; `empty` and
   * `empty_logit` are meaningful only then.
   */
  bool has_empty_decision;
  bool empty;
  double empty_logit;
} LvgPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *lvg_last_error(void);

/**
 * Loads a checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum LvgStatus lvg_model_load(const char *path, struct LvgModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`lvg_model_load`] and not be used afterwards.
 */
void lvg_model_free(struct LvgModel *model);

/**
 * Input image size and vocabulary size the model expects.
 *
 * # Safety
 * `model` must be a live handle; the out pointers writable.
 */
enum LvgStatus lvg_model_input_shape(const struct LvgModel *model,
                                     size_t *height,
                                     size_t *width,
                                     size_t *vocab_size);

/**
 * Segments the referred object.
 *
 * `rgb` holds `height * width * 3` interleaved bytes, `tokens` the
 * expression's word ids. The binary mask (0 or 1 per pixel, row-major) is
 * written to `mask_out`, which must hold `height * width` bytes.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum LvgStatus lvg_predict(const struct LvgModel *model,
                           const uint8_t *rgb,
                           size_t height,
                           size_t width,
                           const uint32_t *tokens,
                           size_t n_tokens,
                           uint8_t *mask_out,
                           size_t mask_len,
                           struct LvgPrediction *out);

/**
 * Tight box around the nonzero pixels; `*found` is false for an empty mask.
 *
 * # Safety
 * `mask` must hold `height * width` bytes; `out` and `found` writable.
 */
enum LvgStatus lvg_mask_to_box(const uint8_t *mask,
                               size_t height,
                               size_t width,
                               struct LvgBox *out,
                               bool *found);

/**
 * Intersection over union of two masks; 1 when both are empty.
 *
 * # Safety
 * `a` and `b` must hold `height * width` bytes; `out` writable.
 */
enum LvgStatus lvg_mask_iou(const uint8_t *a,
                            const uint8_t *b,
                            size_t height,
                            size_t width,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENT_VG_H */
