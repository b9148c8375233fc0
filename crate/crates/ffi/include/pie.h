#ifndef PIE_H
#define PIE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PieStatus {
  PIE_STATUS_OK = 0,
  PIE_STATUS_NULL_POINTER = 1,
  PIE_STATUS_INVALID_ARGUMENT = 2,
  PIE_STATUS_IO = 3,
  PIE_STATUS_CHECKPOINT = 4,
  PIE_STATUS_SHAPE = 5,
  PIE_STATUS_NUMERICAL = 6,
  PIE_STATUS_INTERNAL = 7,
} PieStatus;

// Opaque model handle.
typedef struct PieModelHandle PieModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint file. On success `*out` owns a handle that must be
// released with [`pie_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PieStatus pie_model_load(const char *path, struct PieModelHandle **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`pie_model_load`] and not be used afterwards.
void pie_model_free(struct PieModelHandle *model);

// Writes the data dimension D and latent dimension d.
//
// # Safety
// All pointers must be valid.
enum PieStatus pie_model_dims(const struct PieModelHandle *model,
                              size_t *input_dim,
                              size_t *latent_dim);

// Encodes `count` rows of `x` (`count × D`) into `z_out` (`count × d`).
//
// # Safety
// Buffers must hold the stated number of values.
enum PieStatus pie_model_encode(const struct PieModelHandle *model,
                                const double *x,
                                size_t count,
                                double *z_out);

// Decodes `count` latent rows (`count × d`) into `x_out` (`count × D`).
//
// # Safety
// Buffers must hold the stated number of values.
enum PieStatus pie_model_decode(const struct PieModelHandle *model,
                                const double *z,
                                size_t count,
                                double *x_out);

// Per-row log-likelihood of `count` rows of `x` into `out` (`count`).
//
// # Safety
// Buffers must hold the stated number of values.
enum PieStatus pie_model_log_likelihood(const struct PieModelHandle *model,
                                        const double *x,
                                        size_t count,
                                        double *out);

// Decodes `count` draws from `N(0, prior_std² I)` into `x_out`
// (`count × D`). Deterministic in `seed`.
//
// # Safety
// `x_out` must hold `count × D` values.
enum PieStatus pie_model_sample(const struct PieModelHandle *model,
                                size_t count,
                                double prior_std,
                                uint64_t seed,
                                double *x_out);

// Mean variance of the 4-neighbour Laplace response over `count`
// grey-scale `height × width` images.
//
// # Safety
// `images` must hold `count × height × width` values.
enum PieStatus pie_sharpness(const double *images,
                             size_t count,
                             size_t height,
                             size_t width,
                             double *out);

// Copies the calling thread's last error message into `buf` (truncated,
// NUL-terminated) and returns the full message length excluding the NUL.
//
// # Safety
// `buf` must hold `len` bytes, or be null with `len` 0.
size_t pie_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *pie_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIE_H */
