#ifndef PCRP_H
#define PCRP_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible entry point.
 */
typedef enum PcrpStatus {
  PCRP_STATUS_OK = 0,
  PCRP_STATUS_NULL_POINTER = 1,
  PCRP_STATUS_INVALID_ARGUMENT = 2,
  PCRP_STATUS_IO = 3,
  PCRP_STATUS_PARSE = 4,
  PCRP_STATUS_SHAPE = 5,
  PCRP_STATUS_DEGENERATE_POSE = 6,
  PCRP_STATUS_CHECKPOINT = 7,
  PCRP_STATUS_NUMERIC = 8,
  PCRP_STATUS_BUFFER_TOO_SMALL = 9,
  PCRP_STATUS_PANIC = 10,
} PcrpStatus;

/**
 * Loaded or generated skeleton dataset.
 */
typedef struct PcrpDataset PcrpDataset;

/**
 * Trained encoder restored from a checkpoint.
 */
typedef struct PcrpEncoder PcrpEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pcrp_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * Valid until the next call into the library on this thread.
 */
const char *pcrp_last_error_message(void);

/**
 * Loads a JSONL dataset. `manifest_path` may be NULL to use the data path
 * with extension `manifest.json`.
 */
enum PcrpStatus pcrp_dataset_load(const char *data_path,
                                  const char *manifest_path,
                                  struct PcrpDataset **out);

/**
 * Generates the labeled sinusoidal synthetic dataset.
 */
enum PcrpStatus pcrp_dataset_synth(size_t n_per_class,
                                   size_t classes,
                                   size_t frames,
                                   size_t joints,
                                   double noise_sigma,
                                   uint64_t seed,
                                   struct PcrpDataset **out);

/**
 * Writes a dataset as JSONL plus manifest. `manifest_path` may be NULL.
 */
enum PcrpStatus pcrp_dataset_save(const struct PcrpDataset *dataset,
                                  const char *data_path,
                                  const char *manifest_path);

/**
 * New dataset in view-invariant body coordinates.
 */
enum PcrpStatus pcrp_dataset_preprocess(const struct PcrpDataset *dataset,
                                        struct PcrpDataset **out);

/**
 * Number of sequences; 0 for NULL.
 */
size_t pcrp_dataset_len(const struct PcrpDataset *dataset);

/**
 * Joints per frame; 0 for NULL.
 */
size_t pcrp_dataset_joint_count(const struct PcrpDataset *dataset);

/**
 * Copies labels into `out` (length `len`, at least the dataset length);
 * unlabeled sequences are written as -1.
 */
enum PcrpStatus pcrp_dataset_labels(const struct PcrpDataset *dataset, int64_t *out, size_t len);

void pcrp_dataset_free(struct PcrpDataset *dataset);

/**
 * Pretrains an encoder and writes the checkpoint to `checkpoint_path`.
 * `config_json` holds a training config (NULL for defaults). When `out` is
 * non-NULL it receives the trained encoder.
 */
enum PcrpStatus pcrp_train(const struct PcrpDataset *dataset,
                           const char *config_json,
                           const char *checkpoint_path,
                           struct PcrpEncoder **out);

enum PcrpStatus pcrp_encoder_load(const char *checkpoint_path, struct PcrpEncoder **out);

/**
 * Encoding width C; 0 for NULL or an unreadable config.
 */
size_t pcrp_encoder_dim(const struct PcrpEncoder *encoder);

/**
 * Final-step encodings of every sequence, row-major N×C, into `out`
 * (length `len` ≥ N·C).
 */
enum PcrpStatus pcrp_encoder_encode(const struct PcrpEncoder *encoder,
                                    const struct PcrpDataset *dataset,
                                    double *out,
                                    size_t len);

/**
 * Linear-probe accuracy on a stratified split of a labeled dataset.
 */
enum PcrpStatus pcrp_linear_probe(const struct PcrpEncoder *encoder,
                                  const struct PcrpDataset *dataset,
                                  double train_fraction,
                                  size_t epochs,
                                  double learning_rate,
                                  uint64_t seed,
                                  double *accuracy);

void pcrp_encoder_free(struct PcrpEncoder *encoder);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCRP_H */
