#ifndef ABACUS_H
#define ABACUS_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AbacusStatus {
  ABACUS_STATUS_OK = 0,
  ABACUS_STATUS_NULL_POINTER = 1,
  ABACUS_STATUS_INVALID_UTF8 = 2,
  ABACUS_STATUS_IO = 3,
  ABACUS_STATUS_INVALID_INPUT = 4,
  ABACUS_STATUS_MODEL = 5,
  ABACUS_STATUS_PANIC = 6,
} AbacusStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct AbacusModel AbacusModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AbacusStatus abacus_model_load(const char *path, struct AbacusModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`abacus_model_load`] and not be used afterwards.
 */
void abacus_model_free(struct AbacusModel *model);

/**
 * Number of learned scalars; 0 for an oracle stub.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum AbacusStatus abacus_model_param_count(const struct AbacusModel *model, uint64_t *out);

/**
 * Greedy answer to a canonical question such as `"123+45"`, written
 * most-significant digit first.
 *
 * # Safety
 * `model` must be a live handle, `question` NUL-terminated, and `out` a
 * valid pointer that receives a string to release with
 * [`abacus_string_free`].
 */
enum AbacusStatus abacus_generate(const struct AbacusModel *model,
                                  const char *question,
                                  uint32_t max_new_tokens,
                                  char **out);

/**
 * Exact answer to a canonical question, most-significant digit first.
 *
 * # Safety
 * `question` must be NUL-terminated and `out` a valid pointer.
 */
enum AbacusStatus abacus_oracle_answer(const char *question, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void abacus_string_free(char *s);

/**
 * Message for the most recent failure on this thread; empty after a
 * success. Valid until the next call on the same thread.
 */
const char *abacus_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABACUS_H */
