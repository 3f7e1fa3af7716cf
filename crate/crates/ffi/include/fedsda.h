#ifndef FEDSDA_H
#define FEDSDA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum FedsdaStatus {
  FEDSDA_STATUS_OK = 0,
  FEDSDA_STATUS_NULL_POINTER = 1,
  FEDSDA_STATUS_INVALID_ARGUMENT = 2,
  // The image has too little tissue to separate.
  FEDSDA_STATUS_DEGENERATE = 3,
  FEDSDA_STATUS_IO = 4,
  // Malformed model file.
  FEDSDA_STATUS_FORMAT = 5,
  // Numerical failure (non-finite values, rejected samples, matrix root).
  FEDSDA_STATUS_NUMERIC = 6,
  FEDSDA_STATUS_PANIC = 7,
} FedsdaStatus;

// Trained conditional stain generator.
typedef struct FedsdaModel FedsdaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a
// successful call. Valid until the next call on the same thread.
const char *fedsda_last_error(void);

// Library version as a static nul-terminated string.
const char *fedsda_version(void);

// Separates an RGB image into a stain matrix (6 doubles) and, if
// `out_density` is non-null, a density map of `2 * width * height` doubles.
//
// # Safety
// `rgb` must point to `3 * width * height` bytes and `out_stains` to 6
// writable doubles; `out_density` is either null or points to
// `2 * width * height` writable doubles.
enum FedsdaStatus fedsda_separate(const uint8_t *rgb,
                                  size_t width,
                                  size_t height,
                                  double lambda,
                                  size_t max_iters,
                                  double tol,
                                  double *out_stains,
                                  double *out_density);

// Renders `255 exp(-w h)` into `out_rgb`.
//
// # Safety
// `stains` must point to 6 doubles, `density` to `2 * width * height`
// doubles and `out_rgb` to `3 * width * height` writable bytes.
enum FedsdaStatus fedsda_reconstruct(const double *stains,
                                     const double *density,
                                     size_t width,
                                     size_t height,
                                     uint8_t *out_rgb);

// Loads a model file written by the command-line tool.
//
// # Safety
// `path` must be a nul-terminated UTF-8 string and `out` a valid pointer.
// The handle written to `out` must be released with [`fedsda_model_free`].
enum FedsdaStatus fedsda_model_load(const char *path, struct FedsdaModel **out);

// Reads a model from an in-memory copy of a model file.
//
// # Safety
// `bytes` must point to `len` bytes and `out` must be a valid pointer.
enum FedsdaStatus fedsda_model_from_bytes(const uint8_t *bytes,
                                          size_t len,
                                          struct FedsdaModel **out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from this library not yet freed.
void fedsda_model_free(struct FedsdaModel *model);

// Number of conditions (clients) the model was trained on.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum FedsdaStatus fedsda_model_num_conditions(const struct FedsdaModel *model, size_t *out);

// Draws `count` stain matrices under a one-based `condition` into
// `out_stains` (`6 * count` doubles). Uses the same random stream as the
// command-line `sample` for the same seed.
//
// # Safety
// `model` must be a live handle and `out_stains` must point to
// `6 * count` writable doubles.
enum FedsdaStatus fedsda_model_sample(const struct FedsdaModel *model,
                                      size_t condition,
                                      size_t count,
                                      uint64_t seed,
                                      double *out_stains);

// Fréchet distance between two sets of stain matrices (at least 2 each).
//
// # Safety
// `a` and `b` must point to `6 * na` and `6 * nb` doubles; `out` must be
// a valid pointer.
enum FedsdaStatus fedsda_fd(const double *a, size_t na, const double *b, size_t nb, double *out);

// Channel-averaged 1-D Wasserstein distance between two images' intensity
// distributions, in units of full scale.
//
// # Safety
// `a` and `b` must point to `3 * width * height` bytes each; `out` must be
// a valid pointer.
enum FedsdaStatus fedsda_wd(const uint8_t *a,
                            const uint8_t *b,
                            size_t width,
                            size_t height,
                            double *out);

// Mean SSIM over channels and windows.
//
// # Safety
// `a` and `b` must point to `3 * width * height` bytes each; `out` must be
// a valid pointer.
enum FedsdaStatus fedsda_ssim(const uint8_t *a,
                              const uint8_t *b,
                              size_t width,
                              size_t height,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDSDA_H */
