#ifndef DICM_H
#define DICM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every exported function.
typedef enum DicmStatus {
  DICM_STATUS_OK = 0,
  DICM_STATUS_NULL_POINTER = 1,
  DICM_STATUS_INVALID_ARGUMENT = 2,
  DICM_STATUS_IO = 3,
  DICM_STATUS_FORMAT = 4,
  DICM_STATUS_CONFIG = 5,
  DICM_STATUS_UNKNOWN_IMAGE = 6,
  DICM_STATUS_OUT_OF_VOCABULARY = 7,
  DICM_STATUS_UNDEFINED = 8,
  DICM_STATUS_CHECKPOINT = 9,
  DICM_STATUS_INTERNAL = 10,
} DicmStatus;

// A trained model with its image embeddings precomputed.
typedef struct DicmModel DicmModel;

// One impression to score. `behavior_items` and `behavior_images` both
// point to `behavior_len` ids and may be null when it is zero.
typedef struct DicmSample {
  uint32_t user_id;
  uint32_t scenario_id;
  uint32_t ad_id;
  uint32_t category_id;
  uint32_t ad_image;
  const uint32_t *behavior_items;
  const uint32_t *behavior_images;
  size_t behavior_len;
} DicmSample;

typedef struct DicmPrediction {
  double logit;
  double probability;
} DicmPrediction;

// Storage and traffic per mini-batch for one parameter-placement mode,
// in bytes. `mode` is 0 for store-in-worker, 1 for ps-store-in-server
// and 2 for ams.
typedef struct DicmAccountingRow {
  uint32_t mode;
  double worker_storage;
  double server_storage;
  double comm_all;
  double comm_image;
} DicmAccountingRow;

typedef struct DicmAccounting {
  struct DicmAccountingRow rows[3];
  size_t raw_dim;
  size_t image_dim;
  double compression_ratio;
  uint64_t id_param_bytes;
  size_t batches;
} DicmAccounting;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null if none.
// The pointer stays valid until the next failing call on this thread.
const char *dicm_last_error_message(void);

// Forgets the last error message of this thread.
void dicm_clear_last_error(void);

// Opens the model in `checkpoint_path`, built with the configuration in
// `config_path`, and embeds every image of `data_dir/images.dmat`.
// Images that only appear later are embedded on demand when scored.
//
// # Safety
// Path arguments must be nul-terminated strings; `out` must be writable.
enum DicmStatus dicm_model_open(const char *config_path,
                                const char *checkpoint_path,
                                const char *data_dir,
                                struct DicmModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`dicm_model_open`] and not be used afterwards.
void dicm_model_free(struct DicmModel *model);

// Number of images with a precomputed embedding.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum DicmStatus dicm_model_image_count(const struct DicmModel *model, size_t *out);

// Scores one impression.
//
// # Safety
// `model` must be a live handle, `sample` readable and `out` writable.
enum DicmStatus dicm_model_predict(const struct DicmModel *model,
                                   const struct DicmSample *sample,
                                   struct DicmPrediction *out);

// Scores `len` impressions into `out[0..len]`. Nothing is written unless
// every impression scores.
//
// # Safety
// `samples` and `out` must hold `len` elements each.
enum DicmStatus dicm_model_predict_batch(const struct DicmModel *model,
                                         const struct DicmSample *samples,
                                         size_t len,
                                         struct DicmPrediction *out);

// Area under the ROC curve; tied scores count one half.
//
// # Safety
// `scores` and `labels` must hold `len` elements; `out` must be writable.
enum DicmStatus dicm_auc(const double *scores, const uint8_t *labels, size_t len, double *out);

// Impression-weighted mean of per-user AUC over users with both labels.
//
// # Safety
// `users`, `scores` and `labels` must hold `len` elements; `out` must be
// writable.
enum DicmStatus dicm_gauc(const uint32_t *users,
                          const double *scores,
                          const uint8_t *labels,
                          size_t len,
                          double *out);

// Mean binary cross-entropy of probabilities. `clamped` may be null;
// otherwise it receives how many probabilities were clamped into (0, 1).
//
// # Safety
// `probabilities` and `labels` must hold `len` elements; `out` must be
// writable.
enum DicmStatus dicm_log_loss(const double *probabilities,
                              const uint8_t *labels,
                              size_t len,
                              double *out,
                              size_t *clamped);

// Accounting over the training split in `data_dir` with the cluster and
// dimensions of `config_path`.
//
// # Safety
// Path arguments must be nul-terminated strings; `out` must be writable.
enum DicmStatus dicm_accounting(const char *config_path,
                                const char *data_dir,
                                struct DicmAccounting *out);

// Raw feature width over embedded width.
//
// # Safety
// `out` must be writable.
enum DicmStatus dicm_compression_ratio(size_t raw_dim, size_t image_dim, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DICM_H */
