#ifndef SEULAB_H
#define SEULAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SeuStatus {
  SEU_STATUS_OK = 0,
  SEU_STATUS_NULL_POINTER = 1,
  SEU_STATUS_INVALID_ARGUMENT = 2,
  SEU_STATUS_MALFORMED_HEADER = 3,
  SEU_STATUS_RANGE_ERROR = 4,
  SEU_STATUS_DTYPE_ERROR = 5,
  SEU_STATUS_UNKNOWN_TENSOR = 6,
  SEU_STATUS_INDEX_ERROR = 7,
  SEU_STATUS_UNKNOWN_TARGET = 8,
  SEU_STATUS_RECORD_MISMATCH = 9,
  SEU_STATUS_ZERO_NORM = 10,
  SEU_STATUS_CONFIG_ERROR = 11,
  SEU_STATUS_RUNTIME_ERROR = 12,
  SEU_STATUS_PANIC = 13,
} SeuStatus;

/**
 * Parsed checkpoint. Immutable; shared by every view created from it.
 */
typedef struct SeuCheckpoint SeuCheckpoint;

/**
 * Copy-on-write view over a checkpoint.
 */
typedef struct SeuView SeuView;

/**
 * Byte buffer owned by the library.
 */
typedef struct SeuBuffer {
  uint8_t *data;
  size_t len;
} SeuBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *seu_last_error_message(void);

double seu_half_decode(uint16_t bits);

/**
 * Round-to-nearest-even binary16 encoding.
 */
uint16_t seu_half_encode(double value);

/**
 * # Safety
 * `out` must be a valid pointer to a `uint16_t`.
 */
enum SeuStatus seu_half_flip_bit(uint16_t bits, uint32_t bit, uint16_t *out);

/**
 * Parses a checkpoint container. The bytes are copied.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out` must be valid for writes.
 */
enum SeuStatus seu_checkpoint_parse(const uint8_t *bytes, size_t len, struct SeuCheckpoint **out);

/**
 * # Safety
 * `ckpt` must be NULL or a handle from [`seu_checkpoint_parse`] not yet freed.
 */
void seu_checkpoint_free(struct SeuCheckpoint *ckpt);

/**
 * # Safety
 * `ckpt` must be a live handle, `name` a NUL-terminated string and `out`
 * valid for writes.
 */
enum SeuStatus seu_checkpoint_element_count(const struct SeuCheckpoint *ckpt,
                                            const char *name,
                                            size_t *out);

/**
 * Fraction of set bits per position (index 0 = mantissa LSB) over the named
 * tensors.
 *
 * # Safety
 * `names` must point to `count` NUL-terminated strings; `out` to 16 doubles.
 */
enum SeuStatus seu_checkpoint_bit_statistics(const struct SeuCheckpoint *ckpt,
                                             const char *const *names,
                                             size_t count,
                                             double *out);

/**
 * Pristine view over `ckpt`. The view keeps the checkpoint data alive, so
 * the checkpoint handle may be freed first.
 *
 * # Safety
 * `ckpt` must be a live handle; `out` valid for writes.
 */
enum SeuStatus seu_view_new(const struct SeuCheckpoint *ckpt, struct SeuView **out);

/**
 * # Safety
 * `view` must be NULL or a live handle from [`seu_view_new`].
 */
void seu_view_free(struct SeuView *view);

/**
 * Flips `bit` of element `index` of tensor `name` in place. Writes the old
 * and new patterns when the out pointers are non-NULL.
 *
 * # Safety
 * `view` must be a live handle, `name` a NUL-terminated string; the out
 * pointers must be NULL or valid for writes.
 */
enum SeuStatus seu_view_flip(struct SeuView *view,
                             const char *name,
                             size_t index,
                             uint32_t bit,
                             uint16_t *original,
                             uint16_t *flipped);

/**
 * # Safety
 * `view` must be a live handle, `name` a NUL-terminated string, `out` valid.
 */
enum SeuStatus seu_view_read(const struct SeuView *view,
                             const char *name,
                             size_t index,
                             uint16_t *out);

/**
 * Serializes the view (overlay applied) into a new buffer.
 *
 * # Safety
 * `view` must be a live handle; `out` valid for writes.
 */
enum SeuStatus seu_view_write(const struct SeuView *view, struct SeuBuffer *out);

/**
 * # Safety
 * `buf` must come from [`seu_view_write`] and not have been freed.
 */
void seu_buffer_free(struct SeuBuffer buf);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void seu_string_free(char *s);

/**
 * Tensor name for a selector such as `down.0.t0.sa.wv`. `scheme` is
 * `canonical` (toy model, default topology) or `sd2-diffusers`.
 *
 * # Safety
 * `selector` and `scheme` must be NUL-terminated strings; `out` valid.
 */
enum SeuStatus seu_resolve_selector(const char *selector, const char *scheme, char **out);

/**
 * `100 * max(0, cos(a, b))` over two `len`-element vectors.
 *
 * # Safety
 * `a` and `b` must point to `len` doubles; `out` valid.
 */
enum SeuStatus seu_clip_score(const double *a, const double *b, size_t len, double *out);

/**
 * Runs a campaign described by TOML text and returns the result as JSON.
 * `threads` of 0 uses the default pool.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out_json` valid.
 */
enum SeuStatus seu_campaign_run_json(const char *config_toml, uint32_t threads, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEULAB_H */
