#ifndef PREMA_H
#define PREMA_H

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes shared by every function in this library.
 */
typedef enum PremaStatus {
  PREMA_STATUS_OK = 0,
  PREMA_STATUS_VALIDATION = 1,
  PREMA_STATUS_IO = 2,
  PREMA_STATUS_CHECKPOINT = 3,
  PREMA_STATUS_NULL_POINTER = 4,
  PREMA_STATUS_PANIC = 5,
} PremaStatus;

/**
 * A loaded model. Only ever handled through a pointer.
 */
typedef struct PremaModel PremaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *prema_last_error(void);

/**
 * Loads a stage-2 checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PremaStatus prema_model_load(const char *path, struct PremaModel **out);

/**
 * Releases a model. Null is accepted.
 *
 * # Safety
 * `model` must come from [`prema_model_load`] and not be used afterwards.
 */
void prema_model_free(struct PremaModel *model);

/**
 * Length of the shape descriptor, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t prema_model_descriptor_dim(const struct PremaModel *model);

/**
 * Number of classes, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t prema_model_num_classes(const struct PremaModel *model);

/**
 * Side length of the square views the model expects, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t prema_model_image_size(const struct PremaModel *model);

/**
 * Embeds `n_views` row-major images of `image_size²` floats each, in view
 * order, and writes the descriptor (`descriptor_dim` entries) to `out`.
 *
 * # Safety
 * `images` must hold `n_views · image_size²` floats and `out` must have room
 * for `out_len` doubles.
 */
enum PremaStatus prema_embed(const struct PremaModel *model,
                             const float *images,
                             uintptr_t n_views,
                             double *out,
                             uintptr_t out_len);

/**
 * Like [`prema_embed`] but writes class logits (`num_classes` entries).
 *
 * # Safety
 * Same contract as [`prema_embed`].
 */
enum PremaStatus prema_classify(const struct PremaModel *model,
                                const float *images,
                                uintptr_t n_views,
                                double *out,
                                uintptr_t out_len);

/**
 * Reads a PVWI view image. With `out` null only the dimensions are written;
 * otherwise `out` must hold `height · width` floats.
 *
 * # Safety
 * `height` and `width` must be writable; `out` must be null or hold `out_len` floats.
 */
enum PremaStatus prema_read_view_image(const char *path,
                                       uintptr_t *height,
                                       uintptr_t *width,
                                       float *out,
                                       uintptr_t out_len);

/**
 * Average precision of a ranked relevance list (nonzero bytes are relevant).
 *
 * # Safety
 * `relevant` must hold `len` bytes and `out` must be writable.
 */
enum PremaStatus prema_average_precision(const uint8_t *relevant, uintptr_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREMA_H */
