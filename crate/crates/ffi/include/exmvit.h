#ifndef EXMVIT_H
#define EXMVIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum ExmvitStatus {
  EXMVIT_STATUS_OK = 0,
  EXMVIT_STATUS_NULL_POINTER = 1,
  EXMVIT_STATUS_INVALID_ARGUMENT = 2,
  EXMVIT_STATUS_UNKNOWN_VARIANT = 3,
  EXMVIT_STATUS_CONFIG = 4,
  EXMVIT_STATUS_IO = 5,
  EXMVIT_STATUS_PARSE = 6,
  EXMVIT_STATUS_WEIGHTS_MISMATCH = 7,
  EXMVIT_STATUS_SHAPE = 8,
  /**
   * A panic was caught at the boundary.
   */
  EXMVIT_STATUS_INTERNAL = 99,
} ExmvitStatus;

/**
 * Opaque model handle.
 */
typedef struct ExmvitModel ExmvitModel;

typedef struct ExmvitModelInfo {
  size_t input_size;
  size_t class_count;
  size_t classifier_width;
  size_t parameter_count;
} ExmvitModelInfo;

typedef struct ExmvitAuditTotals {
  size_t strict_total;
  size_t paper_convention_total;
  size_t baseline_total;
  size_t classifier_width;
} ExmvitAuditTotals;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *exmvit_last_error(void);

/**
 * NUL-terminated crate version.
 */
const char *exmvit_version(void);

/**
 * Builds a registered variant with parameters drawn from `seed`.
 *
 * # Safety
 * `variant` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ExmvitStatus exmvit_model_build(const char *variant, uint64_t seed, struct ExmvitModel **out);

/**
 * Loads a weights file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ExmvitStatus exmvit_model_load(const char *path, struct ExmvitModel **out);

/**
 * Writes a weights file.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum ExmvitStatus exmvit_model_save(const struct ExmvitModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void exmvit_model_free(struct ExmvitModel *model);

/**
 * # Safety
 * `model` must come from this library and `info` be writable.
 */
enum ExmvitStatus exmvit_model_info(const struct ExmvitModel *model, struct ExmvitModelInfo *info);

/**
 * Eval-mode forward pass on one `3 × S × S` channel-major image, where
 * `S` is the model's input size. Writes `class_count` logits.
 *
 * # Safety
 * `image` must hold `image_len` floats and `logits` room for `logits_len`.
 */
enum ExmvitStatus exmvit_infer(const struct ExmvitModel *model,
                               const float *image,
                               size_t image_len,
                               float *logits,
                               size_t logits_len);

/**
 * Parameter totals of a registered variant.
 *
 * # Safety
 * `variant` must be NUL-terminated and `totals` writable.
 */
enum ExmvitStatus exmvit_audit(const char *variant, struct ExmvitAuditTotals *totals);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXMVIT_H */
