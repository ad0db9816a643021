#ifndef LASPA_H
#define LASPA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum LaspaStatus {
  LASPA_STATUS_OK = 0,
  LASPA_STATUS_NULL_ARGUMENT = 1,
  LASPA_STATUS_CONFIG = 2,
  LASPA_STATUS_SHAPE = 3,
  LASPA_STATUS_INPUT = 4,
  LASPA_STATUS_NON_FINITE = 5,
  LASPA_STATUS_FORMAT = 6,
  LASPA_STATUS_CHECKPOINT = 7,
  LASPA_STATUS_IO = 8,
  LASPA_STATUS_INTERNAL = 9,
} LaspaStatus;

/**
 * A log-mel spectrogram, `n_frames × n_mels`, row-major.
 */
typedef struct LaspaMel LaspaMel;

/**
 * A trained model, ready for speaker-embedding inference.
 */
typedef struct LaspaModel LaspaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *laspa_last_error(void);

/**
 * Loads a checkpoint trained under the run configuration at `config_path`
 * (null for the defaults). Fails if the checkpoint does not match it.
 *
 * # Safety
 * String arguments must be nul-terminated; `out_model` must be writable.
 */
enum LaspaStatus laspa_model_load(const char *config_path,
                                  const char *checkpoint_path,
                                  struct LaspaModel **out_model);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`laspa_model_load`] and not be used afterwards.
 */
void laspa_model_free(struct LaspaModel *model);

/**
 * Embedding width of the model; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t laspa_model_embed_dim(const struct LaspaModel *model);

/**
 * Mel-band count the model expects; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t laspa_model_n_mels(const struct LaspaModel *model);

/**
 * Speaker embedding of a row-major `n_frames × n_mels` log-mel matrix,
 * written to `out` (`out_len` must equal the embedding width).
 *
 * # Safety
 * `frames` must hold `n_frames * n_mels` floats; `out` must hold `out_len` doubles.
 */
enum LaspaStatus laspa_model_embed(const struct LaspaModel *model,
                                   const float *frames,
                                   size_t n_frames,
                                   size_t n_mels,
                                   double *out_values,
                                   size_t out_len);

/**
 * Log-mel spectrogram of mono samples under the default front end;
 * audio at other rates is resampled first.
 *
 * # Safety
 * `samples` must hold `n_samples` floats; `out_mel` must be writable.
 */
enum LaspaStatus laspa_mel_compute(const float *samples,
                                   size_t n_samples,
                                   uint32_t sample_rate,
                                   struct LaspaMel **out_mel);

/**
 * # Safety
 * `mel` must be null or a live handle.
 */
size_t laspa_mel_n_frames(const struct LaspaMel *mel);

/**
 * # Safety
 * `mel` must be null or a live handle.
 */
size_t laspa_mel_n_mels(const struct LaspaMel *mel);

/**
 * Row-major frame data, valid while the handle lives; null for a null handle.
 *
 * # Safety
 * `mel` must be null or a live handle.
 */
const float *laspa_mel_data(const struct LaspaMel *mel);

/**
 * # Safety
 * `mel` must come from [`laspa_mel_compute`] and not be used afterwards.
 */
void laspa_mel_free(struct LaspaMel *mel);

/**
 * Cosine similarity of two equal-length vectors.
 *
 * # Safety
 * `a` and `b` must hold `len` doubles; `out_score` must be writable.
 */
enum LaspaStatus laspa_cosine(const double *a, const double *b, size_t len, double *out_score);

/**
 * Equal error rate in percent.
 *
 * # Safety
 * Score arrays must hold the stated counts; `out_eer` must be writable.
 */
enum LaspaStatus laspa_eer(const double *target_scores,
                           size_t n_target,
                           const double *nontarget_scores,
                           size_t n_nontarget,
                           double *out_eer);

/**
 * Normalized minimum detection cost at the given operating point.
 *
 * # Safety
 * Score arrays must hold the stated counts; `out_dcf` must be writable.
 */
enum LaspaStatus laspa_min_dcf(const double *target_scores,
                               size_t n_target,
                               const double *nontarget_scores,
                               size_t n_nontarget,
                               double p_target,
                               double c_miss,
                               double c_fa,
                               double *out_dcf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LASPA_H */
