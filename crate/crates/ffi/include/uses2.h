#ifndef USES2_H
#define USES2_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum Uses2Status {
  USES2_STATUS_OK = 0,
  USES2_STATUS_NULL_ARGUMENT = 1,
  USES2_STATUS_INVALID_ARGUMENT = 2,
  USES2_STATUS_UNSUPPORTED_RATE = 3,
  USES2_STATUS_INVALID_SIGNAL = 4,
  USES2_STATUS_CONFIG = 5,
  USES2_STATUS_CHECKPOINT = 6,
  USES2_STATUS_IO = 7,
  USES2_STATUS_BUFFER_TOO_SMALL = 8,
  USES2_STATUS_INTERNAL = 9,
  USES2_STATUS_PANIC = 10,
} Uses2Status;

/**
 * Opaque model handle.
 */
typedef struct Uses2Model Uses2Model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint directory. On success `*out` owns a handle to release with
 * [`uses2_model_free`].
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum Uses2Status uses2_model_load(const char *dir, struct Uses2Model **out);

/**
 * Builds a freshly initialized model. `config_json` is a JSON object as accepted by
 * the command-line tool's "model" section, or null for the default comp variant.
 *
 * # Safety
 * `config_json` must be null or NUL-terminated; `out` must be valid.
 */
enum Uses2Status uses2_model_new(const char *config_json, uint64_t seed, struct Uses2Model **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void uses2_model_free(struct Uses2Model *model);

/**
 * Number of trainable parameters.
 *
 * # Safety
 * Pointers must be valid.
 */
enum Uses2Status uses2_model_param_count(const struct Uses2Model *model, size_t *out);

/**
 * Multiply-accumulate operations per second of input.
 *
 * # Safety
 * Pointers must be valid.
 */
enum Uses2Status uses2_model_macs_per_second(const struct Uses2Model *model,
                                             uint32_t rate_hz,
                                             size_t channels,
                                             double *out);

/**
 * Enhances `channels` channel-major runs of `frames` samples each at `rate_hz` and
 * writes `frames` single-channel samples to `out`, which holds `out_len` floats.
 *
 * # Safety
 * `samples` must hold `channels * frames` floats and `out` must hold `out_len`.
 */
enum Uses2Status uses2_enhance(const struct Uses2Model *model,
                               const float *samples,
                               size_t channels,
                               size_t frames,
                               uint32_t rate_hz,
                               float *out,
                               size_t out_len);

/**
 * Message of the last failed call on this thread, empty after a success. The pointer
 * stays valid until the next call on the same thread.
 */
const char *uses2_last_error(void);

/**
 * Static description of a status code.
 */
const char *uses2_status_string(enum Uses2Status status);

/**
 * Library version.
 */
const char *uses2_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* USES2_H */
