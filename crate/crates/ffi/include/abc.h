#ifndef ABC_H
#define ABC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AbcStatus {
  ABC_STATUS_OK = 0,
  ABC_STATUS_NULL_POINTER = 1,
  ABC_STATUS_DOMAIN = 2,
  ABC_STATUS_NUMERIC = 3,
  ABC_STATUS_USAGE = 4,
  ABC_STATUS_CONFIG = 5,
  ABC_STATUS_FORMAT = 6,
  ABC_STATUS_IO = 7,
  ABC_STATUS_PANIC = 8,
} AbcStatus;

/**
 * Streaming decoder; holds its own copy of the model.
 */
typedef struct AbcDecoder AbcDecoder;

/**
 * Trained or freshly initialized toy model.
 */
typedef struct AbcModel AbcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *abc_last_error(void);

/**
 * Builds a model from a JSON model configuration (all keys optional).
 */
enum AbcStatus abc_model_new(const char *config_json, struct AbcModel **out);

enum AbcStatus abc_model_load(const char *path, struct AbcModel **out);

enum AbcStatus abc_model_save(const struct AbcModel *model, const char *path);

/**
 * Total scalar parameters and the share held by learned control matrices.
 */
enum AbcStatus abc_model_param_counts(const struct AbcModel *model, size_t *total, size_t *control);

enum AbcStatus abc_model_vocab(const struct AbcModel *model, size_t *out);

/**
 * Releases a model. NULL is ignored.
 */
void abc_model_free(struct AbcModel *model);

/**
 * Greedy decoding of `max_len` tokens into `out`. For a language model
 * `input` is the prompt; for seq2seq it is the source.
 */
enum AbcStatus abc_greedy_decode(const struct AbcModel *model,
                                 const uint32_t *input,
                                 size_t input_len,
                                 uint32_t *out,
                                 size_t max_len);

/**
 * Starts a streaming decoder. `source` may be NULL with length 0 for a
 * language model.
 */
enum AbcStatus abc_decoder_new(const struct AbcModel *model,
                               const uint32_t *source,
                               size_t source_len,
                               struct AbcDecoder **out);

/**
 * Feeds one token and writes `vocab` next-token logits.
 */
enum AbcStatus abc_decoder_step(struct AbcDecoder *dec,
                                uint32_t token,
                                double *logits,
                                size_t vocab);

/**
 * Bytes held by the causal self-attention states.
 */
enum AbcStatus abc_decoder_state_bytes(const struct AbcDecoder *dec, size_t *out);

void abc_decoder_free(struct AbcDecoder *dec);

/**
 * `K̃ = Σ φ_i ⊗ k_i`, `Ṽ = Σ φ_i ⊗ v_i` from `phi` (N×n), `keys` and
 * `values` (N×d) into `ktilde` and `vtilde` (n×d).
 */
enum AbcStatus abc_build_memory(const double *phi,
                                const double *keys,
                                const double *values,
                                size_t len,
                                size_t n,
                                size_t d,
                                double *ktilde,
                                double *vtilde);

/**
 * `out = Ṽᵀ softmax(K̃ q / temperature)` with `ktilde`, `vtilde` n×d.
 */
enum AbcStatus abc_readout(const double *q,
                           const double *ktilde,
                           const double *vtilde,
                           size_t n,
                           size_t d,
                           double temperature,
                           double *out);

/**
 * Runs one named invariant suite. `passed` is set to 1 or 0.
 */
enum AbcStatus abc_verify_suite(const char *name,
                                uint64_t seed,
                                int32_t *passed,
                                double *max_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABC_H */
