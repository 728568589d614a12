#ifndef TAED_H
#define TAED_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  TAED_STATUS_OK = 0,
  TAED_STATUS_NULL_POINTER = 1,
  TAED_STATUS_INVALID_ARGUMENT = 2,
  TAED_STATUS_IO = 3,
  TAED_STATUS_FORMAT = 4,
  TAED_STATUS_CONFIG = 5,
  TAED_STATUS_NUMERIC = 6,
  TAED_STATUS_PANIC = 7,
} TaedStatus;

/**
 * A loaded model.
 */
typedef struct TaedModel TaedModel;

/**
 * Tokens and per-token delays from one decode.
 */
typedef struct TaedResult TaedResult;

/**
 * Decode settings. `chunk_frames == 0` decodes offline.
 */
typedef struct {
  size_t chunk_frames;
  double tau;
  size_t max_symbols_per_frame;
} TaedDecodeOptions;

typedef struct {
  double al;
  double laal;
  double ap;
  double dal;
} TaedLatency;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *taed_last_error(void);

/**
 * Defaults: offline, no blank penalty, the library's emission cap.
 */
TaedDecodeOptions taed_decode_options_default(void);

/**
 * # Safety
 * `ckpt_path` must be a NUL-terminated string; `out` must be writable.
 */
TaedStatus taed_model_load(const char *ckpt_path, TaedModel **out);

/**
 * # Safety
 * `model` must come from [`taed_model_load`] or be null.
 */
void taed_model_free(TaedModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
TaedStatus taed_model_feature_dim(const TaedModel *model, size_t *out);

/**
 * Vocabulary size including BOS; the blank index equals this value.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
TaedStatus taed_model_vocab_size(const TaedModel *model, size_t *out);

/**
 * Greedy decoding of `frames × feature_dim` row-major features.
 *
 * # Safety
 * `model` must be a live handle, `features` must hold `frames * feature_dim`
 * floats, and `out` must be writable.
 */
TaedStatus taed_decode(const TaedModel *model,
                       const float *features,
                       size_t frames,
                       size_t feature_dim,
                       TaedDecodeOptions options,
                       TaedResult **out);

/**
 * # Safety
 * `result` must come from [`taed_decode`] or be null.
 */
void taed_result_free(TaedResult *result);

/**
 * Number of emitted tokens.
 *
 * # Safety
 * `result` must be a live handle.
 */
size_t taed_result_len(const TaedResult *result);

/**
 * Pointer to `taed_result_len` token ids, owned by the result.
 *
 * # Safety
 * `result` must be a live handle.
 */
const uint32_t *taed_result_tokens(const TaedResult *result);

/**
 * Pointer to `taed_result_len` emission delays in milliseconds.
 *
 * # Safety
 * `result` must be a live handle.
 */
const double *taed_result_delays(const TaedResult *result);

/**
 * Source length in milliseconds.
 *
 * # Safety
 * `result` must be a live handle.
 */
double taed_result_source_ms(const TaedResult *result);

/**
 * Frames where the emission cap stopped the search.
 *
 * # Safety
 * `result` must be a live handle.
 */
size_t taed_result_cap_hits(const TaedResult *result);

/**
 * AL, LAAL, AP and DAL of a decode against a reference of `ref_len` tokens.
 *
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
TaedStatus taed_result_latency(const TaedResult *result, size_t ref_len, TaedLatency *out);

/**
 * Latency metrics from raw delays.
 *
 * # Safety
 * `delays` must hold `n` values and `out` must be writable.
 */
TaedStatus taed_latency(const double *delays,
                        size_t n,
                        double source_ms,
                        size_t ref_len,
                        TaedLatency *out);

/**
 * Word error rate of one hypothesis.
 *
 * # Safety
 * The arrays must hold the given number of elements; `out` must be writable.
 */
TaedStatus taed_wer(const uint32_t *reference,
                    size_t ref_len,
                    const uint32_t *hypothesis,
                    size_t hyp_len,
                    double *out);

/**
 * Corpus BLEU (0..100) over `n` sentence pairs stored back to back, with
 * per-sentence lengths.
 *
 * # Safety
 * Each token array must hold the sum of its lengths; `out` must be writable.
 */
TaedStatus taed_bleu(const uint32_t *ref_tokens,
                     const size_t *ref_lens,
                     const uint32_t *hyp_tokens,
                     const size_t *hyp_lens,
                     size_t n,
                     double *out);

/**
 * Element-wise mean of `n` checkpoint files, written to `out_path`.
 *
 * # Safety
 * `paths` must hold `n` NUL-terminated strings; `out_path` must be one.
 */
TaedStatus taed_average_checkpoints(const char *const *paths, size_t n, const char *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAED_H */
