#ifndef MULTIDA_H
#define MULTIDA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum MdaStatus {
  MDA_STATUS_OK = 0,
  MDA_STATUS_NULL_ARGUMENT = 1,
  MDA_STATUS_INVALID_ARGUMENT = 2,
  MDA_STATUS_CONFIG = 3,
  MDA_STATUS_IO = 4,
  MDA_STATUS_FORMAT = 5,
  MDA_STATUS_CONTRACT = 6,
  MDA_STATUS_TRAINING = 7,
  MDA_STATUS_PANIC = 8,
} MdaStatus;

/**
 * Opaque dataset handle.
 */
typedef struct MdaDataset MdaDataset;

/**
 * Opaque model handle (all branches).
 */
typedef struct MdaModel MdaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mda_version(void);

/**
 * Byte length of the last error message on this thread, without the NUL.
 * Zero when the last call succeeded.
 */
size_t mda_last_error_length(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * `len - 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t mda_last_error_message(char *buf, size_t len);

/**
 * Synthetic glyph dataset: `n` samples of `classes` classes at `size × size`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum MdaStatus mda_dataset_glyphs(size_t classes,
                                  size_t n,
                                  size_t size,
                                  double noise,
                                  uint64_t seed,
                                  struct MdaDataset **out);

/**
 * Loads an IDX image/label file pair.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` a valid handle slot.
 */
enum MdaStatus mda_dataset_load_idx(const char *images,
                                    const char *labels,
                                    struct MdaDataset **out);

/**
 * Number of samples, or zero for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t mda_dataset_len(const struct MdaDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void mda_dataset_free(struct MdaDataset *dataset);

/**
 * Trains the model described by a TOML experiment config and returns it.
 * Artifacts are not written; use [`mda_model_save`] for the checkpoint.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum MdaStatus mda_train_from_config(const char *config_path, struct MdaModel **out);

/**
 * Loads a checkpoint written by the CLI or [`mda_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum MdaStatus mda_model_load(const char *path, struct MdaModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum MdaStatus mda_model_save(const struct MdaModel *model, const char *path);

/**
 * Number of branches, or zero for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mda_model_num_branches(const struct MdaModel *model);

/**
 * Single-branch network made of the shared blocks and branch `branch`.
 *
 * # Safety
 * `model` must be a live handle; `out` a valid handle slot.
 */
enum MdaStatus mda_model_export_branch(const struct MdaModel *model,
                                       size_t branch,
                                       struct MdaModel **out);

/**
 * Writes the accuracy of every branch on `dataset` into `accuracy`, which
 * must hold `capacity ≥ mda_model_num_branches(model)` doubles.
 *
 * # Safety
 * Handles must be live; `accuracy` must point to `capacity` writable doubles.
 */
enum MdaStatus mda_model_evaluate(const struct MdaModel *model,
                                  const struct MdaDataset *dataset,
                                  double *accuracy,
                                  size_t capacity);

/**
 * Class probabilities of branch `branch` for `count` images laid out as
 * `[count, channels, height, width]` floats. `probs` receives
 * `count × num_classes` values.
 *
 * # Safety
 * `pixels` must point to `count·channels·height·width` floats and `probs`
 * to `probs_len` writable floats.
 */
enum MdaStatus mda_model_predict(const struct MdaModel *model,
                                 size_t branch,
                                 const float *pixels,
                                 size_t count,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 float *probs,
                                 size_t probs_len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mda_model_free(struct MdaModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULTIDA_H */
