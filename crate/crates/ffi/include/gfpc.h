#ifndef GFPC_H
#define GFPC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GfpcStatus {
  GFPC_STATUS_OK = 0,
  GFPC_STATUS_NULL_POINTER = 1,
  GFPC_STATUS_INVALID_ARGUMENT = 2,
  GFPC_STATUS_DIMENSION = 3,
  GFPC_STATUS_IO = 4,
  GFPC_STATUS_CHECKPOINT = 5,
  GFPC_STATUS_DEGENERATE = 6,
  GFPC_STATUS_INTERNAL = 7,
} GfpcStatus;

/**
 * Opaque depth network handle.
 */
typedef struct GfpcDepthNet GfpcDepthNet;

/**
 * Canny settings; thresholds are fractions of the maximum magnitude.
 */
typedef struct GfpcCannyParams {
  double sigma;
  size_t kernel_size;
  double low;
  double high;
} GfpcCannyParams;

typedef struct GfpcMetricReport {
  double delta1;
  double delta2;
  double delta3;
  double rel;
  double rms;
  double log10;
  uint64_t pixels;
} GfpcMetricReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *gfpc_last_error_message(void);

struct GfpcCannyParams gfpc_canny_params_default(void);

/**
 * Gradient field of an RGB image into `out` (`height * width` floats in
 * `[0,1]`). `params` may be null for the defaults.
 *
 * # Safety
 * `rgb` must hold `height * width * 3` bytes, `out` room for
 * `height * width` floats, and `params` must be null or valid.
 */
enum GfpcStatus gfpc_gradient_field(const uint8_t *rgb,
                                    size_t height,
                                    size_t width,
                                    const struct GfpcCannyParams *params,
                                    float *out);

/**
 * Loads a depth checkpoint into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GfpcStatus gfpc_depthnet_load(const char *path, struct GfpcDepthNet **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `net` must be null or a handle from [`gfpc_depthnet_load`] not yet freed.
 */
void gfpc_depthnet_free(struct GfpcDepthNet *net);

/**
 * Prediction size for a `height x width` input: half in each dimension.
 *
 * # Safety
 * All pointers must be valid.
 */
enum GfpcStatus gfpc_depthnet_output_size(const struct GfpcDepthNet *net,
                                          size_t height,
                                          size_t width,
                                          size_t *out_height,
                                          size_t *out_width);

/**
 * Predicts depth in meters into `out` (`(height/2) * (width/2)` floats).
 *
 * # Safety
 * `net` must be a live handle, `rgb` must hold `height * width * 3`
 * bytes and `out` room for the prediction.
 */
enum GfpcStatus gfpc_depthnet_predict(const struct GfpcDepthNet *net,
                                      const uint8_t *rgb,
                                      size_t height,
                                      size_t width,
                                      float *out);

/**
 * Metrics of one prediction against ground truth, both `height x width`
 * row-major meters. `valid` may be null; `max_depth <= 0` disables the cap.
 *
 * # Safety
 * `pred` and `truth` must hold `height * width` doubles, `valid` null or
 * `height * width` bytes, and `out` must be valid.
 */
enum GfpcStatus gfpc_evaluate(const double *pred,
                              const double *truth,
                              const uint8_t *valid,
                              size_t height,
                              size_t width,
                              double min_depth,
                              double max_depth,
                              struct GfpcMetricReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GFPC_H */
