#ifndef ECHOMODE_H
#define ECHOMODE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every FFI call.
 */
typedef enum EchomodeStatus {
  EchomodeStatus_Ok = 0,
  EchomodeStatus_Format = 1,
  EchomodeStatus_Shape = 2,
  EchomodeStatus_Manifest = 3,
  EchomodeStatus_Argument = 4,
  EchomodeStatus_Data = 5,
  EchomodeStatus_Checkpoint = 6,
  EchomodeStatus_Io = 7,
  EchomodeStatus_NullPointer = 8,
  EchomodeStatus_InvalidUtf8 = 9,
  /**
   * Metric undefined for the given input (e.g. single-class labels).
   */
  EchomodeStatus_UndefinedMetric = 10,
  /**
   * Unexpected internal failure (caught panic).
   */
  EchomodeStatus_Internal = 11,
} EchomodeStatus;

/**
 * Opaque handle to an extracted M-mode stack.
 */
typedef struct EchomodeStack EchomodeStack;

/**
 * Opaque handle to a loaded B-mode video.
 */
typedef struct EchomodeVideo EchomodeVideo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the most recent error message for this thread into `buf`
 * (NUL-terminated, truncated to `len` bytes). Returns the full message
 * length in bytes, excluding the terminator.
 */
uintptr_t echomode_last_error(char *buf, uintptr_t len);

/**
 * Load an MMV1 video file into a new handle.
 */
enum EchomodeStatus echomode_video_load(const char *path, struct EchomodeVideo **out);

/**
 * Generate a synthetic pulsating-ellipse video with the given target EF.
 */
enum EchomodeStatus echomode_video_synth(double ef,
                                         uint64_t seed,
                                         uint32_t frames,
                                         struct EchomodeVideo **out);

enum EchomodeStatus echomode_video_dims(const struct EchomodeVideo *video,
                                        uint32_t *t,
                                        uint32_t *h,
                                        uint32_t *w);

void echomode_video_free(struct EchomodeVideo *video);

/**
 * Scan-line angles in degrees for `m` modes; `out` must hold `m` doubles.
 */
enum EchomodeStatus echomode_angle_set(uint32_t m, double *out);

/**
 * Extract an M-mode stack: `clip` 0 = full 112-frame clip, 1 = random
 * short clip (32 frames, period 2) drawn from `seed`.
 */
enum EchomodeStatus echomode_stack_extract(const struct EchomodeVideo *video,
                                           uint32_t m,
                                           uint32_t clip,
                                           uint64_t seed,
                                           struct EchomodeStack **out);

enum EchomodeStatus echomode_stack_dims(const struct EchomodeStack *stack,
                                        uint32_t *m,
                                        uint32_t *s,
                                        uint32_t *t_clip);

/**
 * Copy one mode's s*t_clip pixels (row-major, [0,1] intensities) into
 * `out`, which must hold at least s*t_clip floats.
 */
enum EchomodeStatus echomode_stack_pixels(const struct EchomodeStack *stack,
                                          uint32_t mode,
                                          float *out);

void echomode_stack_free(struct EchomodeStack *stack);

/**
 * Tie-corrected AUROC of `scores` against binary `labels` (nonzero =
 * positive). Single-class labels yield `UndefinedMetric`.
 */
enum EchomodeStatus echomode_auroc(const double *scores,
                                   const uint8_t *labels,
                                   uintptr_t n,
                                   double *out);

/**
 * Area under the precision-recall curve; same conventions as
 * `echomode_auroc`.
 */
enum EchomodeStatus echomode_auprc(const double *scores,
                                   const uint8_t *labels,
                                   uintptr_t n,
                                   double *out);

enum EchomodeStatus echomode_mae(const double *pred, const double *truth, uintptr_t n, double *out);

enum EchomodeStatus echomode_rmse(const double *pred,
                                  const double *truth,
                                  uintptr_t n,
                                  double *out);

enum EchomodeStatus echomode_r2(const double *pred, const double *truth, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECHOMODE_H */
