#ifndef PANOFILL_H
#define PANOFILL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_CONTRACT = 3,
  PF_STATUS_IO = 4,
  PF_STATUS_FORMAT = 5,
  PF_STATUS_DIVERGENCE = 6,
  PF_STATUS_PANIC = 7,
} PfStatus;

/**
 * Opaque trained pipeline bundle.
 */
typedef struct PfBundle PfBundle;

/**
 * Opaque panorama image (`h x w` RGB, values in `[0, 1]`).
 */
typedef struct PfImage PfImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pf_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call on the same thread.
 */
const char *pf_last_error_message(void);

/**
 * Creates an image from `h * w * 3` row-major RGB values.
 *
 * # Safety
 * `data` must point to `h * w * 3` readable doubles; `out` must be writable.
 */
enum PfStatus pf_image_new(size_t h, size_t w, const double *data, struct PfImage **out);

/**
 * Loads a PNG or PNM image.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PfStatus pf_image_load(const char *path, struct PfImage **out);

/**
 * Saves an image; the format follows the file extension.
 *
 * # Safety
 * `img` must be a live handle and `path` a NUL-terminated string.
 */
enum PfStatus pf_image_save(const struct PfImage *img, const char *path);

/**
 * # Safety
 * `img` must be a live handle; `h` and `w` must be writable.
 */
enum PfStatus pf_image_dims(const struct PfImage *img, size_t *h, size_t *w);

/**
 * Copies the `h * w * 3` values into `out`, which holds `len` doubles.
 *
 * # Safety
 * `img` must be a live handle and `out` must hold `len` writable doubles.
 */
enum PfStatus pf_image_copy_data(const struct PfImage *img, double *out, size_t len);

/**
 * # Safety
 * `img` must be NULL or a handle not yet freed.
 */
void pf_image_free(struct PfImage *img);

/**
 * Renders one procedural `h x 2h` panorama.
 *
 * # Safety
 * `out` must be writable.
 */
enum PfStatus pf_synth_panorama(size_t h, uint64_t seed, struct PfImage **out);

/**
 * # Safety
 * `img` must be a live handle and `out` writable.
 */
enum PfStatus pf_seam_discontinuity(const struct PfImage *img, double *out);

/**
 * Loads a bundle checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PfStatus pf_bundle_load(const char *path, struct PfBundle **out);

/**
 * Randomly initialised bundle with the small test configuration
 * (`32 x 64` training size).
 *
 * # Safety
 * `out` must be writable.
 */
enum PfStatus pf_bundle_untrained_smoke(uint64_t seed, struct PfBundle **out);

/**
 * # Safety
 * `bundle` must be a live handle and `path` a NUL-terminated string.
 */
enum PfStatus pf_bundle_save(const struct PfBundle *bundle, const char *path);

/**
 * Writes the bundle's hex digest (64 characters plus NUL) into `buf`.
 *
 * # Safety
 * `bundle` must be a live handle and `buf` must hold `len` writable bytes.
 */
enum PfStatus pf_bundle_digest(const struct PfBundle *bundle, char *buf, size_t len);

/**
 * # Safety
 * `bundle` must be NULL or a handle not yet freed.
 */
void pf_bundle_free(struct PfBundle *bundle);

/**
 * Completes `input`, known inside `fov` (e.g. `angular:90x90@0`), with
 * the bundle's sampler and sampling seed `seed`. Pixels outside the field
 * of view are ignored.
 *
 * # Safety
 * `bundle` and `input` must be live handles, `fov` a NUL-terminated string
 * and `out` writable.
 */
enum PfStatus pf_complete(const struct PfBundle *bundle,
                          const struct PfImage *input,
                          const char *fov,
                          uint64_t seed,
                          struct PfImage **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PANOFILL_H */
