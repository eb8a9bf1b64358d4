#ifndef CMR_FFI_H
#define CMR_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CmrStatus {
  CMR_STATUS_OK = 0,
  CMR_STATUS_NULL_POINTER = 1,
  CMR_STATUS_INVALID_ARGUMENT = 2,
  CMR_STATUS_IO = 3,
  CMR_STATUS_NUMERIC = 4,
  CMR_STATUS_BUFFER_TOO_SMALL = 5,
  CMR_STATUS_INTERNAL = 6,
} CmrStatus;

// A compressive memory sized for one model.
typedef struct CmrMemory CmrMemory;

// A model and its vocabulary.
typedef struct CmrModel CmrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library from this thread.
const char *cmr_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cmr_version(void);

// Loads a checkpoint written by `cmr train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CmrStatus cmr_model_load(const char *path, struct CmrModel **out);

// # Safety
// `model` must come from [`cmr_model_load`] or be null.
void cmr_model_free(struct CmrModel *model);

// # Safety
// `model` must be a live handle.
size_t cmr_model_vocab_size(const struct CmrModel *model);

// Id of `token`, or the unknown-token id.
//
// # Safety
// `model` must be a live handle and `token` a NUL-terminated string.
enum CmrStatus cmr_model_token_id(const struct CmrModel *model, const char *token, uint32_t *out);

// Creates an empty memory sized for `model`.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum CmrStatus cmr_memory_new(const struct CmrModel *model, struct CmrMemory **out);

// # Safety
// `memory` must come from this library or be null.
void cmr_memory_free(struct CmrMemory *memory);

// Number of demonstrations stored so far.
//
// # Safety
// `memory` must be a live handle.
size_t cmr_memory_stored_count(const struct CmrMemory *memory);

// Replaces `memory` with the batched preload of `n_demos` demonstrations.
// Demonstration `i` is `tokens[offsets[i]..offsets[i + 1]]`, so `offsets`
// holds `n_demos + 1` entries. `sum` selects summing instead of averaging
// each batch.
//
// # Safety
// All pointers must be valid for the lengths they describe.
enum CmrStatus cmr_memory_preload(const struct CmrModel *model,
                                  struct CmrMemory *memory,
                                  const uint32_t *tokens,
                                  const size_t *offsets,
                                  size_t n_demos,
                                  size_t demo_batch_size,
                                  bool sum);

// Writes a bitwise-exact snapshot of `memory`.
//
// # Safety
// `memory` must be a live handle and `path` a NUL-terminated string.
enum CmrStatus cmr_memory_save(const struct CmrMemory *memory, const char *path);

// Reads a snapshot written by [`cmr_memory_save`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CmrStatus cmr_memory_load(const char *path, struct CmrMemory **out);

// Greedy decoding of `input` reading `memory` (null reads nothing).
// Writes up to `capacity` ids to `out` and the full length to `out_len`;
// returns `BufferTooSmall` when they do not fit.
//
// # Safety
// Pointers must be valid for the lengths given; `memory` may be null.
enum CmrStatus cmr_decode(const struct CmrModel *model,
                          const struct CmrMemory *memory,
                          const uint32_t *input,
                          size_t input_len,
                          size_t max_new,
                          uint32_t *out,
                          size_t capacity,
                          size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMR_FFI_H */
