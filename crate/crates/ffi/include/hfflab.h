#ifndef HFFLAB_H
#define HFFLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HffStatus {
  HFF_STATUS_OK = 0,
  HFF_STATUS_NULL_POINTER = 1,
  HFF_STATUS_INVALID_ARGUMENT = 2,
  HFF_STATUS_CONFIG = 3,
  HFF_STATUS_IO = 4,
  HFF_STATUS_CHECKPOINT = 5,
  HFF_STATUS_RUNTIME = 6,
  HFF_STATUS_BUFFER_TOO_SMALL = 7,
  HFF_STATUS_PANIC = 8,
} HffStatus;

// Opaque single-precision encoder.
typedef struct HffEncoder HffEncoder;

typedef struct HffEncoderConfig {
  size_t num_layers;
  size_t model_dim;
  size_t num_heads;
  size_t ffn_expansion;
  size_t conv_kernel;
  size_t frontend_subsampling;
  size_t input_dim;
} HffEncoderConfig;

typedef struct HffParamCounts {
  size_t encoder_trainable;
  size_t encoder_total;
  size_t head_trainable;
} HffParamCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hff_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the full message length
// without the terminator; `buf` may be null to query it.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t hff_last_error(char *buf, size_t len);

// Writes the six-layer desk configuration.
//
// # Safety
// `out` must be null or valid for writes.
enum HffStatus hff_encoder_config_desk(struct HffEncoderConfig *out);

// Writes the 24-layer, 1024-wide configuration.
//
// # Safety
// `out` must be null or valid for writes.
enum HffStatus hff_encoder_config_large(struct HffEncoderConfig *out);

// Builds a randomly initialized encoder.
//
// # Safety
// `config` must be null or point to a config; `out` must be null or valid
// for writes. The handle written to `out` must be released with
// `hff_encoder_free`.
enum HffStatus hff_encoder_new(const struct HffEncoderConfig *config,
                               uint64_t seed,
                               struct HffEncoder **out);

// Loads an encoder checkpoint written by `hff_encoder_save` or the CLI.
//
// # Safety
// As for `hff_encoder_new`; `path` must be a NUL-terminated string.
enum HffStatus hff_encoder_load(const struct HffEncoderConfig *config,
                                const char *path,
                                struct HffEncoder **out);

// # Safety
// `encoder` must be a live handle; `path` a NUL-terminated string.
enum HffStatus hff_encoder_save(const struct HffEncoder *encoder, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `encoder` must be null or a handle not yet freed.
void hff_encoder_free(struct HffEncoder *encoder);

// Total number of encoder parameters, adapters included.
//
// # Safety
// `encoder` must be a live handle; `out` valid for writes.
enum HffStatus hff_encoder_num_params(const struct HffEncoder *encoder, size_t *out);

// Number of output frames for `num_frames` input frames.
//
// # Safety
// `encoder` must be a live handle; `out` valid for writes.
enum HffStatus hff_encoder_output_len(const struct HffEncoder *encoder,
                                      size_t num_frames,
                                      size_t *out);

// Encodes one utterance and writes the output of block `layer` as a
// row-major `(output_len, model_dim)` matrix. `frames` holds
// `num_frames * input_dim` values. `out_len` is the capacity of `out` in
// floats; on `BUFFER_TOO_SMALL` nothing is written.
//
// # Safety
// `frames` must be valid for `num_frames * input_dim` reads and `out` for
// `out_len` writes.
enum HffStatus hff_encoder_encode(const struct HffEncoder *encoder,
                                  const float *frames,
                                  size_t num_frames,
                                  size_t layer,
                                  float *out,
                                  size_t out_len);

// Closed-form trainable-parameter counts. `fusion` and `peft` are spec
// strings in the CLI syntax (for example `hff-b:taps=all;fp=512` or
// `adapter:layers=all;d=128`); either may be null.
//
// # Safety
// `config` must point to a config, the strings must be null or
// NUL-terminated, and `out` valid for writes.
enum HffStatus hff_count_params(const struct HffEncoderConfig *config,
                                const char *fusion,
                                const char *peft,
                                struct HffParamCounts *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HFFLAB_H */
