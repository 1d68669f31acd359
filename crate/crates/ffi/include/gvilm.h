#ifndef GVILM_H
#define GVILM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GvilmStatus {
  GVILM_STATUS_OK = 0,
  GVILM_STATUS_NULL_POINTER = 1,
  GVILM_STATUS_INVALID_UTF8 = 2,
  GVILM_STATUS_ARGUMENT = 3,
  GVILM_STATUS_CONFIG = 4,
  GVILM_STATUS_IO = 5,
  GVILM_STATUS_FORMAT = 6,
  GVILM_STATUS_HASH_MISMATCH = 7,
  GVILM_STATUS_NUMERIC = 8,
  GVILM_STATUS_BUFFER_TOO_SMALL = 9,
  GVILM_STATUS_PANIC = 10,
} GvilmStatus;

/**
 * Corpus splits, numbered as in corpus files.
 */
typedef enum GvilmSplit {
  GVILM_SPLIT_TRAIN = 0,
  GVILM_SPLIT_VAL = 1,
  GVILM_SPLIT_TEST = 2,
  GVILM_SPLIT_PROBE = 3,
} GvilmSplit;

typedef struct GvilmConfig GvilmConfig;

typedef struct GvilmCorpus GvilmCorpus;

typedef struct GvilmModel GvilmModel;

typedef struct GvilmRetrieval {
  double r1;
  double r5;
  double r10;
  double medr;
  size_t pool;
} GvilmRetrieval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *gvilm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gvilm_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void gvilm_string_free(char *s);

/**
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum GvilmStatus gvilm_config_default(struct GvilmConfig **out);

/**
 * Parses a key-value config file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum GvilmStatus gvilm_config_load(const char *path, struct GvilmConfig **out);

/**
 * Sets one key; the config is revalidated and left unchanged on failure.
 *
 * # Safety
 * `cfg` must be a live config handle; `key` and `value` NUL-terminated.
 */
enum GvilmStatus gvilm_config_set(struct GvilmConfig *cfg, const char *key, const char *value);

/**
 * Hex hash of the config; free the result with `gvilm_string_free`.
 *
 * # Safety
 * `cfg` must be a live config handle; `out` a valid pointer.
 */
enum GvilmStatus gvilm_config_hash(const struct GvilmConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be null or a config handle not yet freed.
 */
void gvilm_config_free(struct GvilmConfig *cfg);

/**
 * Generates a corpus with default scene parameters.
 *
 * # Safety
 * `out` must be a valid handle slot.
 */
enum GvilmStatus gvilm_corpus_generate(size_t size, uint64_t seed, struct GvilmCorpus **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` a valid handle slot.
 */
enum GvilmStatus gvilm_corpus_load(const char *path, struct GvilmCorpus **out);

/**
 * # Safety
 * `corpus` must be a live corpus handle; `path` NUL-terminated.
 */
enum GvilmStatus gvilm_corpus_save(const struct GvilmCorpus *corpus, const char *path);

/**
 * Number of items in the corpus, or 0 for a null handle.
 *
 * # Safety
 * `corpus` must be null or a live corpus handle.
 */
size_t gvilm_corpus_len(const struct GvilmCorpus *corpus);

/**
 * # Safety
 * `corpus` must be null or a corpus handle not yet freed.
 */
void gvilm_corpus_free(struct GvilmCorpus *corpus);

/**
 * Trains to completion. With a non-null `out_dir`, the metrics log and
 * checkpoints are written there.
 *
 * # Safety
 * Handles must be live; `out_dir` null or NUL-terminated; `out` a valid
 * handle slot.
 */
enum GvilmStatus gvilm_train(const struct GvilmConfig *cfg,
                             const struct GvilmCorpus *corpus,
                             const char *out_dir,
                             struct GvilmModel **out);

/**
 * Loads the model stored in a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` a valid handle slot.
 */
enum GvilmStatus gvilm_model_load(const char *path, struct GvilmModel **out);

/**
 * Dimension of the shared embedding space, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t gvilm_model_embed_dim(const struct GvilmModel *model);

/**
 * # Safety
 * `model` must be null or a model handle not yet freed.
 */
void gvilm_model_free(struct GvilmModel *model);

/**
 * Unit-norm caption embedding written to `out[0..embed_dim]`.
 *
 * # Safety
 * `model` must be live, `text` NUL-terminated, `out` valid for `out_len`
 * floats.
 */
enum GvilmStatus gvilm_encode_text(const struct GvilmModel *model,
                                   const char *text,
                                   float *out,
                                   size_t out_len);

/**
 * Unit-norm video embedding of a `frames × height × width × 3` RGB clip in
 * `[0, 1]`, written to `out[0..embed_dim]`. Assignments are hard and
 * noiseless.
 *
 * # Safety
 * `model` must be live, `data` valid for `frames·height·width·3` floats,
 * `out` valid for `out_len` floats.
 */
enum GvilmStatus gvilm_encode_video(const struct GvilmModel *model,
                                    const float *data,
                                    size_t frames,
                                    size_t height,
                                    size_t width,
                                    float *out,
                                    size_t out_len);

/**
 * Text-to-video retrieval over one corpus split.
 *
 * # Safety
 * Handles must be live; `out` a valid pointer.
 */
enum GvilmStatus gvilm_eval_retrieval(const struct GvilmModel *model,
                                      const struct GvilmCorpus *corpus,
                                      enum GvilmSplit split,
                                      struct GvilmRetrieval *out);

/**
 * Worst gradient-check relative error per loss, in the order temporal,
 * grounding, contrastive, total.
 *
 * # Safety
 * `out` must be valid for 4 doubles.
 */
enum GvilmStatus gvilm_gradcheck(uint64_t seed, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GVILM_H */
