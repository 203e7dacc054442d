#ifndef AES_FFI_H
#define AES_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AesStatus {
  AES_STATUS_OK = 0,
  AES_STATUS_NULL_ARGUMENT = 1,
  AES_STATUS_INVALID_UTF8 = 2,
  AES_STATUS_IO = 3,
  AES_STATUS_CORRUPT_CHECKPOINT = 4,
  AES_STATUS_VERSION_MISMATCH = 5,
  AES_STATUS_UNKNOWN_PROMPT = 6,
  AES_STATUS_EMPTY_ESSAY = 7,
  AES_STATUS_INVALID_ARGUMENT = 8,
  AES_STATUS_INTERNAL = 9,
} AesStatus;

/**
 * Loaded model plus the prompt table it was validated against.
 */
typedef struct AesModel AesModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. `prompts_path` may be null for the built-in prompt
 * table.
 *
 * # Safety
 * Non-null string arguments must be NUL-terminated; `out` must be a valid
 * pointer to writable storage for one handle.
 */
enum AesStatus aes_model_load(const char *checkpoint_path,
                              const char *prompts_path,
                              struct AesModel **out);

/**
 * Releases a handle from [`aes_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void aes_model_free(struct AesModel *model);

/**
 * Scores `text` against `prompt_id` and writes the report as JSON.
 *
 * # Safety
 * `model` must be a live handle, `text` NUL-terminated, `out_json` writable.
 */
enum AesStatus aes_model_score_json(const struct AesModel *model,
                                    uint32_t prompt_id,
                                    const char *text,
                                    char **out_json);

/**
 * Writes the handle's prompt table as JSON.
 *
 * # Safety
 * `model` must be a live handle and `out_json` writable.
 */
enum AesStatus aes_prompt_table_json(const struct AesModel *model, char **out_json);

/**
 * Quadratic weighted kappa of two rating arrays of length `n` on the rubric
 * `[min, max]`.
 *
 * # Safety
 * `human` and `machine` must point to `n` readable values; `out` writable.
 */
enum AesStatus aes_qwk(const int32_t *human,
                       const int32_t *machine,
                       size_t n,
                       int32_t min,
                       int32_t max,
                       double *out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void aes_string_free(char *s);

/**
 * Message for the last failure on this thread; empty if none. Valid until
 * the next failing call on the same thread.
 */
const char *aes_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aes_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AES_FFI_H */
