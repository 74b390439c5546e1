#ifndef DYNEDIT_H
#define DYNEDIT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  DYNEDIT_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  DYNEDIT_STATUS_NULL_ARGUMENT = 1,
  /**
   * Bad input: malformed files, invalid camera, out-of-range values.
   */
  DYNEDIT_STATUS_INVALID = 2,
  /**
   * The engine failed while running (non-finite state, I/O).
   */
  DYNEDIT_STATUS_RUNTIME = 3,
  /**
   * The caller's output buffer has the wrong length.
   */
  DYNEDIT_STATUS_BUFFER_SIZE = 4,
  /**
   * A string argument was not UTF-8.
   */
  DYNEDIT_STATUS_UTF8 = 5,
  /**
   * An internal panic was caught at the boundary.
   */
  DYNEDIT_STATUS_PANIC = 6,
} DyneditStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct DyneditModel DyneditModel;

/**
 * Pinhole camera, OpenCV convention, row-major world-to-camera matrix.
 */
typedef struct {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
  double world_to_cam[16];
} DyneditCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error of this thread into `buf` as a NUL-terminated
 * string, truncating to `len - 1` bytes. Returns the full message length
 * without the terminator, so a caller can size a second attempt.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t dynedit_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dynedit_version(void);

/**
 * Loads a model directory written by `train`, `edit` or `refine`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
DyneditStatus dynedit_model_load(const char *dir, DyneditModel **out);

/**
 * Writes the model to `dir` in the same layout `dynedit_model_load` reads.
 *
 * # Safety
 * `model` must come from `dynedit_model_load`; `dir` must be a
 * NUL-terminated string.
 */
DyneditStatus dynedit_model_save(const DyneditModel *model, const char *dir);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or come from `dynedit_model_load` and not have been
 * freed already.
 */
void dynedit_model_free(DyneditModel *model);

/**
 * Number of Gaussians, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dynedit_model_num_gaussians(const DyneditModel *model);

/**
 * Number of dataset timesteps the model was trained on, or 0.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dynedit_model_num_timesteps(const DyneditModel *model);

/**
 * Renders the model at scene time `t` in [0, 1] into `out_rgb`, row-major
 * `height × width × 3`, so `out_len` must equal `width·height·3`.
 *
 * # Safety
 * `model` and `camera` must be valid; `out_rgb` must point to `out_len`
 * writable floats.
 */
DyneditStatus dynedit_render(const DyneditModel *model,
                             const DyneditCamera *camera,
                             double t,
                             float *out_rgb,
                             size_t out_len);

/**
 * PSNR and SSIM of two `height × width × 3` images with values in [0, 1].
 * Identical images score PSNR 99.
 *
 * # Safety
 * `a` and `b` must each point to `width·height·3` floats; the outputs
 * must be writable.
 */
DyneditStatus dynedit_image_quality(const float *a,
                                    const float *b,
                                    uint32_t width,
                                    uint32_t height,
                                    double *psnr_out,
                                    double *ssim_out);

/**
 * Runs the `dynedit` command line in-process with `argv[0..argc]`
 * (`argv[0]` is the program name) and returns its exit code: 0 success,
 * 2 invalid input, 3 runtime failure.
 *
 * # Safety
 * `argv` must hold `argc` NUL-terminated strings.
 */
int dynedit_cli_run(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNEDIT_H */
