/* Generated by cbindgen. Do not edit. */

#ifndef CAPALIGN_H
#define CAPALIGN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CapStatus {
  CAP_STATUS_OK = 0,
  CAP_STATUS_NULL_POINTER = 1,
  CAP_STATUS_INVALID_ARGUMENT = 2,
  CAP_STATUS_IO = 3,
  CAP_STATUS_BAD_CHECKPOINT = 4,
  CAP_STATUS_SHAPE_MISMATCH = 5,
  CAP_STATUS_NUMERIC = 6,
  CAP_STATUS_PANIC = 7,
} CapStatus;

/**
 * Opaque trained model loaded from a checkpoint.
 */
typedef struct CapModel CapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next capalign call on the same thread.
 */
const char *cap_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cap_version(void);

/**
 * Load a checkpoint file. On success `*out` owns a model that must be
 * released with [`cap_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CapStatus cap_model_load(const char *path, struct CapModel **out);

/**
 * # Safety
 * `model` must come from [`cap_model_load`] and not be freed twice. Null is ignored.
 */
void cap_model_free(struct CapModel *model);

/**
 * Embedding dimension, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t cap_model_embed_dim(const struct CapModel *model);

/**
 * Image feature dimension the model expects, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t cap_model_image_dim(const struct CapModel *model);

/**
 * Learned temperature, or NaN for a null model.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
double cap_model_temperature(const struct CapModel *model);

/**
 * Unit text embedding of a caption into `out[0..out_len]`; `out_len` must
 * equal the embedding dimension.
 *
 * # Safety
 * `model` must be a live handle, `text` NUL-terminated, `out` valid for `out_len` writes.
 */
enum CapStatus cap_model_embed_text(const struct CapModel *model,
                                    const char *text,
                                    double *out,
                                    size_t out_len);

/**
 * Unit image embedding of a feature vector.
 *
 * # Safety
 * `features` must be valid for `n` reads and `out` for `out_len` writes.
 */
enum CapStatus cap_model_embed_image(const struct CapModel *model,
                                     const double *features,
                                     size_t n,
                                     double *out,
                                     size_t out_len);

/**
 * Symmetric contrastive loss of `n` paired rows of width `d` (row-major),
 * scaled by `exp(log_inv_tau)`. Gradient outputs may be null to skip them;
 * `grad_u` and `grad_v` hold `n * d` values.
 *
 * # Safety
 * `u` and `v` must be valid for `n * d` reads; non-null outputs must be writable.
 */
enum CapStatus cap_clip_loss(const double *u,
                             const double *v,
                             size_t n,
                             size_t d,
                             double log_inv_tau,
                             double *loss_out,
                             double *grad_u,
                             double *grad_v,
                             double *grad_log_inv_tau);

/**
 * Average precision of a ranked relevance list (non-zero = relevant).
 * `total_relevant` counts relevant items in the whole corpus; pass 0 to use
 * the number of relevant entries in the list.
 *
 * # Safety
 * `relevance` must be valid for `n` reads and `out` writable.
 */
enum CapStatus cap_average_precision(const uint8_t *relevance,
                                     size_t n,
                                     size_t total_relevant,
                                     double *out);

/**
 * Area under the ROC curve for binary `labels` (non-zero = positive).
 *
 * # Safety
 * `scores` and `labels` must be valid for `n` reads and `out` writable.
 */
enum CapStatus cap_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Area under the precision-recall curve.
 *
 * # Safety
 * `scores` and `labels` must be valid for `n` reads and `out` writable.
 */
enum CapStatus cap_auprc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPALIGN_H */
