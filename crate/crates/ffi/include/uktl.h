#ifndef UKTL_H
#define UKTL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UktlStatus {
  UKTL_STATUS_OK = 0,
  UKTL_STATUS_INVALID_ARGUMENT = 1,
  UKTL_STATUS_DIMENSION_MISMATCH = 2,
  UKTL_STATUS_PARSE = 3,
  UKTL_STATUS_IO = 4,
  UKTL_STATUS_NOT_FITTED = 5,
  UKTL_STATUS_NUMERICAL = 6,
  UKTL_STATUS_PANIC = 7,
} UktlStatus;

typedef enum UktlCombine {
  UKTL_COMBINE_SUM = 0,
  UKTL_COMBINE_PRODUCT = 1,
  UKTL_COMBINE_SUM_PRODUCT = 2,
} UktlCombine;

/**
 * Opaque trained classifier loaded from a checkpoint.
 */
typedef struct UktlModel UktlModel;

/**
 * Opaque dense tensor.
 */
typedef struct UktlTensor UktlTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *uktl_version(void);

/**
 * Message for the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next `uktl_*` call on the same thread.
 */
const char *uktl_last_error(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void uktl_string_free(char *s);

/**
 * Builds a tensor from `order` dims and `len` row-major values.
 *
 * # Safety
 * `dims` must point to `order` readable values and `values` to `len`.
 */
enum UktlStatus uktl_tensor_new(const size_t *dims,
                                size_t order,
                                const double *values,
                                size_t len,
                                struct UktlTensor **out);

/**
 * # Safety
 * `t` must be NULL or a live handle from this library.
 */
void uktl_tensor_free(struct UktlTensor *t);

/**
 * Number of modes, or 0 for NULL.
 *
 * # Safety
 * `t` must be NULL or a live handle.
 */
size_t uktl_tensor_order(const struct UktlTensor *t);

/**
 * Number of stored values, or 0 for NULL.
 *
 * # Safety
 * `t` must be NULL or a live handle.
 */
size_t uktl_tensor_len(const struct UktlTensor *t);

/**
 * Copies the dims into `out`, which must hold at least `cap` entries.
 *
 * # Safety
 * `t` must be a live handle and `out` writable for `cap` entries.
 */
enum UktlStatus uktl_tensor_dims(const struct UktlTensor *t, size_t *out, size_t cap);

/**
 * Copies the row-major values into `out`.
 *
 * # Safety
 * `t` must be a live handle and `out` writable for `cap` entries.
 */
enum UktlStatus uktl_tensor_values(const struct UktlTensor *t, double *out, size_t cap);

/**
 * Parses a tensor from TNS text.
 *
 * # Safety
 * `text` must be a NUL-terminated string.
 */
enum UktlStatus uktl_tensor_decode(const char *text, struct UktlTensor **out);

/**
 * Serializes a tensor to TNS text. Free the result with `uktl_string_free`.
 *
 * # Safety
 * `t` must be a live handle.
 */
enum UktlStatus uktl_tensor_encode(const struct UktlTensor *t, char **out);

/**
 * # Safety
 * `t` must be a live handle.
 */
enum UktlStatus uktl_tensor_frobenius_norm(const struct UktlTensor *t, double *out);

/**
 * Kernel value between two tensors of equal shape, using the leading `p`
 * left singular vectors of every unfolding and unit uncertainty.
 *
 * # Safety
 * `a` and `b` must be live handles.
 */
enum UktlStatus uktl_tensor_kernel(const struct UktlTensor *a,
                                   const struct UktlTensor *b,
                                   size_t p,
                                   double bandwidth,
                                   double mu,
                                   enum UktlCombine combine,
                                   double *out);

/**
 * Loads a model checkpoint from a JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum UktlStatus uktl_model_load(const char *path, struct UktlModel **out);

/**
 * Loads a model checkpoint from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string.
 */
enum UktlStatus uktl_model_load_json(const char *json, struct UktlModel **out);

/**
 * # Safety
 * `m` must be NULL or a live handle from this library.
 */
void uktl_model_free(struct UktlModel *m);

/**
 * Number of classes, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live handle.
 */
size_t uktl_model_num_classes(const struct UktlModel *m);

/**
 * Dataset label of class slot `index`.
 *
 * # Safety
 * `m` must be a live handle.
 */
enum UktlStatus uktl_model_label(const struct UktlModel *m, size_t index, size_t *out);

/**
 * Writes one logit per class slot into `logits`.
 *
 * # Safety
 * `m` and `t` must be live handles and `logits` writable for `cap` entries.
 */
enum UktlStatus uktl_model_forward(const struct UktlModel *m,
                                   const struct UktlTensor *t,
                                   double *logits,
                                   size_t cap);

/**
 * Predicted dataset label and its softmax probability.
 *
 * # Safety
 * `m` and `t` must be live handles.
 */
enum UktlStatus uktl_model_predict(const struct UktlModel *m,
                                   const struct UktlTensor *t,
                                   size_t *label,
                                   double *confidence);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UKTL_H */
