#ifndef LFR_H
#define LFR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LfrStatus {
  LFR_STATUS_OK = 0,
  LFR_STATUS_NULL_POINTER = 1,
  LFR_STATUS_INVALID_ARGUMENT = 2,
  LFR_STATUS_IO = 3,
  LFR_STATUS_FORMAT = 4,
  LFR_STATUS_NUMERIC = 5,
  LFR_STATUS_CONFIG = 6,
  LFR_STATUS_BUFFER_TOO_SMALL = 7,
  LFR_STATUS_PANIC = 8,
} LfrStatus;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct LfrModel LfrModel;

/**
 * Evaluation metrics of one depth map.
 */
typedef struct LfrMetrics {
  double abs_rel;
  double sq_rel;
  double rmse;
  double rmse_log;
  double log10;
  double silog;
  double delta1;
  double delta2;
  double delta3;
  uint64_t valid_pixels;
} LfrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lfr_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * excluding the terminator, or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t lfr_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LfrStatus lfr_model_load(const char *path, struct LfrModel **out);

/**
 * Releases a handle from [`lfr_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not used afterwards.
 */
void lfr_model_free(struct LfrModel *model);

/**
 * Input size, backbone depth and number of head levels.
 *
 * # Safety
 * `model` must be a live handle; outputs may be null.
 */
enum LfrStatus lfr_model_shape(const struct LfrModel *model,
                               size_t *height,
                               size_t *width,
                               size_t *layers,
                               size_t *levels);

/**
 * Predicts depth for one interleaved RGB image (`height·width·3` floats in
 * `[0, 1]`). Writes `height·width` depths, `levels` level weights and
 * `levels` selected layer indices; the last two outputs may be null.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum LfrStatus lfr_model_predict(const struct LfrModel *model,
                                 const float *rgb,
                                 size_t rgb_len,
                                 float *depth_out,
                                 size_t depth_len,
                                 double *weights_out,
                                 uint32_t *selected_out,
                                 size_t levels);

/**
 * Depth metrics of `pred` against `gt` (both `height·width`); `gt` entries
 * that are not finite and positive are treated as invalid.
 *
 * # Safety
 * `pred` and `gt` must hold `height·width` elements; `out` must be writable.
 */
enum LfrStatus lfr_eval_metrics(const double *pred,
                                const double *gt,
                                size_t height,
                                size_t width,
                                double min_depth,
                                double max_depth,
                                struct LfrMetrics *out);

/**
 * Spearman rank correlation with average ranks for ties.
 *
 * # Safety
 * `x` and `y` must hold `len` elements; `out` must be writable.
 */
enum LfrStatus lfr_spearman(const double *x, const double *y, size_t len, double *out);

/**
 * One minus the Pearson correlation.
 *
 * # Safety
 * `x` and `y` must hold `len` elements; `out` must be writable.
 */
enum LfrStatus lfr_pearson_distance(const double *x, const double *y, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LFR_H */
