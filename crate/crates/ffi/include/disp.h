#ifndef DISP_H
#define DISP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every exported function.
 */
typedef enum DispStatus {
  DISP_STATUS_OK = 0,
  /*
   A null pointer, bad UTF-8 or an undersized output buffer.
   */
  DISP_STATUS_INVALID_ARGUMENT = 1,
  DISP_STATUS_IO = 2,
  /*
   The checkpoint is malformed or of the wrong kind.
   */
  DISP_STATUS_FORMAT = 3,
  /*
   Shapes or gates violate a model contract.
   */
  DISP_STATUS_CONTRACT = 4,
  DISP_STATUS_USAGE = 5,
  DISP_STATUS_DIVERGED = 6,
  /*
   A Rust panic was caught at the boundary.
   */
  DISP_STATUS_PANIC = 7,
} DispStatus;

/*
 Opaque dense model.
 */
typedef struct DispDenseModel DispDenseModel;

/*
 Opaque pruned model.
 */
typedef struct DispPrunedModel DispPrunedModel;

/*
 Architecture summary of a loaded model.
 */
typedef struct DispModelInfo {
  size_t d;
  size_t n_layers;
  size_t n_heads;
  size_t d_mid;
  size_t vocab_size;
  size_t max_seq_len;
  /*
   1 for the gated MLP, 0 for the standard one.
   */
  uint8_t gated_mlp;
  size_t param_count;
} DispModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *disp_version(void);

/*
 Message of the last failure on this thread, or null. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *disp_last_error(void);

/*
 Loads a dense checkpoint.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DispStatus disp_dense_load(const char *path, struct DispDenseModel **out);

/*
 Releases a dense model. Null is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void disp_dense_free(struct DispDenseModel *model);

/*
 # Safety
 `model` and `out` must be valid pointers.
 */
enum DispStatus disp_dense_info(const struct DispDenseModel *model, struct DispModelInfo *out);

/*
 Writes `batch * seq * vocab_size` logits for row-major `tokens`.

 # Safety
 `tokens` must hold `batch * seq` values and `out` `out_len` doubles.
 */
enum DispStatus disp_dense_logits(const struct DispDenseModel *model,
                                  const uint32_t *tokens,
                                  size_t batch,
                                  size_t seq,
                                  double *out,
                                  size_t out_len);

/*
 Byte-level perplexity of `text` with non-overlapping windows.

 # Safety
 `text` must hold `len` bytes and `out` must be writable.
 */
enum DispStatus disp_dense_perplexity(const struct DispDenseModel *model,
                                      const uint8_t *text,
                                      size_t len,
                                      size_t seq_len,
                                      double *out);

/*
 Writes the 64-character hex weight hash plus a NUL into `buf`.

 # Safety
 `buf` must hold `buf_len` bytes.
 */
enum DispStatus disp_dense_hash(const struct DispDenseModel *model, char *buf, size_t buf_len);

/*
 Extracts a pruned model from a dense one and a gates or pruned checkpoint.

 # Safety
 `model` must be valid, `gates_path` NUL-terminated, `out` writable.
 */
enum DispStatus disp_prune(const struct DispDenseModel *model,
                           const char *gates_path,
                           struct DispPrunedModel **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DispStatus disp_pruned_load(const char *path, struct DispPrunedModel **out);

/*
 # Safety
 `model` must be valid and `path` NUL-terminated.
 */
enum DispStatus disp_pruned_save(const struct DispPrunedModel *model, const char *path);

/*
 Releases a pruned model. Null is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void disp_pruned_free(struct DispPrunedModel *model);

/*
 # Safety
 `model` and `out` must be valid pointers.
 */
enum DispStatus disp_pruned_info(const struct DispPrunedModel *model, struct DispModelInfo *out);

/*
 Kept width of gate `slot` (0..5 for s1..s5) in block `layer`.

 # Safety
 `model` and `out` must be valid pointers.
 */
enum DispStatus disp_pruned_width(const struct DispPrunedModel *model,
                                  size_t layer,
                                  size_t slot,
                                  size_t *out);

/*
 # Safety
 Same contract as [`disp_dense_logits`].
 */
enum DispStatus disp_pruned_logits(const struct DispPrunedModel *model,
                                   const uint32_t *tokens,
                                   size_t batch,
                                   size_t seq,
                                   double *out,
                                   size_t out_len);

/*
 # Safety
 Same contract as [`disp_dense_perplexity`].
 */
enum DispStatus disp_pruned_perplexity(const struct DispPrunedModel *model,
                                       const uint8_t *text,
                                       size_t len,
                                       size_t seq_len,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DISP_H */
