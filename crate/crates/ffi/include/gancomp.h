#ifndef GANCOMP_H
#define GANCOMP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values 2 and 3 match the command line tool's exit codes.
typedef enum {
  GC_STATUS_OK = 0,
  GC_STATUS_NULL_POINTER = 1,
  GC_STATUS_VALIDATION = 2,
  GC_STATUS_NUMERICAL = 3,
  GC_STATUS_SHAPE = 4,
  GC_STATUS_IO = 5,
  GC_STATUS_FORMAT = 6,
  GC_STATUS_UNSUPPORTED = 7,
  GC_STATUS_PANIC = 8,
} GcStatus;

// Channel saliency metrics for [`gc_generator_prune`].
typedef enum {
  GC_METRIC_L1_OUT = 0,
  GC_METRIC_L1_IN = 1,
  GC_METRIC_LOW_ACT = 2,
  GC_METRIC_RANDOM = 3,
  GC_METRIC_CA_L1_OUT = 4,
} GcMetric;

// Opaque feature extractor handle.
typedef struct GcExtractor GcExtractor;

// Opaque generator handle.
typedef struct GcGenerator GcGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t gc_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *gc_version(void);

// Loads a generator checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
GcStatus gc_generator_load(const char *path, GcGenerator **out);

// Writes a generator checkpoint.
//
// # Safety
// `g` must come from this library; `path` must be a NUL-terminated string.
GcStatus gc_generator_save(const GcGenerator *g, const char *path);

// Releases a generator; null is ignored.
//
// # Safety
// `g` must be null or come from this library and not be used afterwards.
void gc_generator_free(GcGenerator *g);

// Latent size, output resolution, trainable parameter count and FLOPs estimate.
//
// # Safety
// `g` must come from this library; each output pointer may be null.
GcStatus gc_generator_info(const GcGenerator *g,
                           size_t *latent_dim,
                           size_t *resolution,
                           size_t *param_count,
                           uint64_t *flops);

// Generates `n` images from `n × latent_dim` latents into `out`, which must hold
// `n × 3 × resolution²` floats.
//
// # Safety
// Pointers must reference arrays of the stated sizes.
GcStatus gc_generator_generate(const GcGenerator *g, const float *z, size_t n, float *out);

// Removes `ratio` of every hidden layer's channels ranked by `metric` and
// returns the rebuilt generator. Sampled metrics use `num_samples` latents
// drawn with `seed`; the content-aware metric uses the luminance oracle mask.
//
// # Safety
// `g` must come from this library; `out` must be writable.
GcStatus gc_generator_prune(const GcGenerator *g,
                            GcMetric metric,
                            double ratio,
                            size_t num_samples,
                            uint64_t seed,
                            GcGenerator **out);

// The feature network compiled into the library.
//
// # Safety
// `out` must be writable.
GcStatus gc_extractor_bundled(GcExtractor **out);

// Releases an extractor; null is ignored.
//
// # Safety
// `e` must be null or come from this library and not be used afterwards.
void gc_extractor_free(GcExtractor *e);

// FID between two image sets of resolution `h × w`.
//
// # Safety
// `a` and `b` must hold `n_a` and `n_b` images; `out` must be writable.
GcStatus gc_fid(const GcExtractor *e,
                const float *a,
                size_t n_a,
                const float *b,
                size_t n_b,
                size_t h,
                size_t w,
                double *out);

// PSNR in dB between two arrays of `len` values spanning `data_range`.
//
// # Safety
// `a` and `b` must hold `len` floats; `out` must be writable.
GcStatus gc_psnr(const float *a, const float *b, size_t len, double data_range, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GANCOMP_H */
