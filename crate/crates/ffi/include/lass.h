#ifndef LASS_H
#define LASS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum LassStatus {
  LASS_STATUS_OK = 0,
  // Any failure without a more specific code.
  LASS_STATUS_FAILED = 1,
  LASS_STATUS_CONFIG = 2,
  LASS_STATUS_PREREQUISITE = 3,
  LASS_STATUS_NUMERICAL = 4,
  LASS_STATUS_NULL_ARGUMENT = 5,
  LASS_STATUS_INVALID_UTF8 = 6,
  LASS_STATUS_IO = 7,
  // Corrupt or incompatible file contents.
  LASS_STATUS_FORMAT = 8,
  // Shapes or layouts that do not line up.
  LASS_STATUS_STRUCTURE = 9,
  LASS_STATUS_BUFFER_TOO_SMALL = 10,
  // A Rust panic was caught at the boundary.
  LASS_STATUS_PANIC = 11,
} LassStatus;

// A per-pair parameter mask.
typedef struct LassMask LassMask;

// A trained model.
typedef struct LassModel LassModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *lass_last_error(void);

// Library version as a static NUL-terminated string.
const char *lass_version(void);

// Loads a checkpoint written by the `lass` pipeline.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum LassStatus lass_model_load(const char *path, struct LassModel **out);

// Writes the model as a checkpoint.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum LassStatus lass_model_save(const struct LassModel *model, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void lass_model_free(struct LassModel *model);

// Vocabulary size and total parameter count.
//
// # Safety
// `model` must come from this library; outputs must be writable.
enum LassStatus lass_model_info(const struct LassModel *model,
                                size_t *vocab_size,
                                size_t *num_params);

// Decodes one source sequence. `src` holds token ids including the
// language prefix; the output excludes the leading target token and the
// end token. `mask` may be null for the full model. On
// `BufferTooSmall`, `out_len` holds the length needed.
//
// # Safety
// `src` must point at `src_len` ids and `out` at `out_cap` writable ids.
enum LassStatus lass_translate(const struct LassModel *model,
                               const struct LassMask *mask,
                               const uint32_t *src,
                               size_t src_len,
                               uint32_t target_token,
                               size_t beam_size,
                               uint32_t *out,
                               size_t out_cap,
                               size_t *out_len);

// Magnitude-prunes the model's maskable weights at `alpha` (per tensor when
// `global` is 0, across all maskable weights otherwise).
//
// # Safety
// Strings must be NUL-terminated; `out` must be writable.
enum LassStatus lass_mask_prune(const struct LassModel *model,
                                double alpha,
                                int32_t global,
                                const char *src_lang,
                                const char *tgt_lang,
                                struct LassMask **out);

// Loads a mask file; a failed checksum gives `Format`.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum LassStatus lass_mask_load(const char *path, struct LassMask **out);

// # Safety
// `mask` must come from this library; `path` must be NUL-terminated.
enum LassStatus lass_mask_save(const struct LassMask *mask, const char *path);

// Releases a mask. Null is ignored.
//
// # Safety
// `mask` must come from this library and not be used afterwards.
void lass_mask_free(struct LassMask *mask);

// Fraction of maskable weights kept.
//
// # Safety
// `mask` must come from this library; `out` must be writable.
enum LassStatus lass_mask_density(const struct LassMask *mask, double *out);

// Share of `a`'s kept weights also kept by `b`.
//
// # Safety
// Both masks must come from this library; `out` must be writable.
enum LassStatus lass_mask_similarity(const struct LassMask *a,
                                     const struct LassMask *b,
                                     double *out);

// Encoder bits of `x_to_pivot` joined with decoder bits of `pivot_to_y`.
//
// # Safety
// Both masks must come from this library; `out` must be writable.
enum LassStatus lass_mask_merge_zero_shot(const struct LassMask *x_to_pivot,
                                          const struct LassMask *pivot_to_y,
                                          struct LassMask **out);

// Runs one pipeline command (`gen-data`, `train-base`, ...) against
// `run_dir`. `config_path` may be null for the defaults; `seed` below zero
// keeps the configured seeds.
//
// # Safety
// Strings must be NUL-terminated; `config_path` may be null.
enum LassStatus lass_run_command(const char *command,
                                 const char *config_path,
                                 const char *run_dir,
                                 int64_t seed,
                                 int32_t force);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LASS_H */
