#ifndef COREFACE_H
#define COREFACE_H

#include <stddef.h>
#include <stdint.h>

#define CF_OK 0

/**
 * A required pointer argument was NULL.
 */
#define CF_ERR_NULL 1

/**
 * An argument or configuration value is out of range.
 */
#define CF_ERR_INVALID 2

/**
 * Buffer sizes or shapes disagree.
 */
#define CF_ERR_DIMENSION 3

/**
 * Zero norms, non-finite values or other numerical failures.
 */
#define CF_ERR_NUMERIC 4

/**
 * The batch or pair list cannot support the requested computation.
 */
#define CF_ERR_DEGENERATE 5

/**
 * Malformed file contents or configuration text.
 */
#define CF_ERR_FORMAT 6

#define CF_ERR_IO 7

/**
 * The library panicked; this indicates a bug.
 */
#define CF_ERR_INTERNAL 8

#define CF_PROTOCOL_S_N 0

#define CF_PROTOCOL_S_2N 1

#define CF_PROTOCOL_D_N 2

#define CF_PROTOCOL_D_2N 3

#define CF_SCM_OFF 0

#define CF_SCM_ZERO 1

#define CF_SCM_EXCLUDE 2

#define CF_HEAD_SOFTMAX 0

#define CF_HEAD_COSFACE 1

#define CF_HEAD_ARCFACE 2

/**
 * Opaque dataset handle.
 */
typedef struct CfDataset CfDataset;

/**
 * Opaque adaptive-margin state.
 */
typedef struct CfMargin CfMargin;

/**
 * Opaque trained-model handle (encoder and classifier head).
 */
typedef struct CfModel CfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cf_version(void);

/**
 * Message of the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *cf_last_error(void);

/**
 * CoReFace contrastive loss of a two-view batch with adaptive margin `m_c`
 * and scale `s`. `grad` (nullable) receives `2 * n_images * dim` values.
 */
int32_t cf_coreface_loss(const double *embeddings,
                         size_t n_images,
                         size_t dim,
                         const uint32_t *labels,
                         int32_t protocol,
                         int32_t scm,
                         double m_c,
                         double s,
                         double *value,
                         double *grad);

/**
 * NT-Xent loss of a two-view batch at temperature `tau`.
 */
int32_t cf_ntxent_loss(const double *embeddings,
                       size_t n_images,
                       size_t dim,
                       double tau,
                       double *value,
                       double *grad);

/**
 * Supervised contrastive loss of a two-view batch at temperature `tau`.
 */
int32_t cf_supcon_loss(const double *embeddings,
                       size_t n_images,
                       size_t dim,
                       const uint32_t *labels,
                       double tau,
                       double *value,
                       double *grad);

/**
 * Mean margin classification loss over `rows` embeddings against a
 * `dim x classes` weight matrix (row-major). `grad` (nullable) receives the
 * embedding gradient, `grad_weight` (nullable) the weight gradient.
 */
int32_t cf_classification_loss(const double *embeddings,
                               size_t rows,
                               size_t dim,
                               const uint32_t *labels,
                               const double *weight,
                               size_t classes,
                               int32_t head,
                               double s,
                               double m,
                               double *value,
                               double *grad,
                               double *grad_weight);

/**
 * Batch margin: mean over images of the view-pair similarity minus the
 * hardest negative under the given protocol and mask mode.
 */
int32_t cf_batch_margin(const double *embeddings,
                        size_t n_images,
                        size_t dim,
                        const uint32_t *labels,
                        int32_t protocol,
                        int32_t scm,
                        double *out);

/**
 * New margin state with momentum `alpha` and value 0.
 */
int32_t cf_margin_new(double alpha, struct CfMargin **out);

/**
 * Fold one batch margin into the state.
 */
int32_t cf_margin_update(struct CfMargin *state, double m_k);

int32_t cf_margin_value(const struct CfMargin *state, double *out);

/**
 * Number of updates applied so far.
 */
int32_t cf_margin_steps(const struct CfMargin *state, uint64_t *out);

void cf_margin_free(struct CfMargin *state);

/**
 * Cross-validated verification accuracy. `fold[i]` assigns pair `i` to one
 * of `folds` folds; `same[i]` is nonzero for same-identity pairs.
 */
int32_t cf_verification_accuracy(const double *sims,
                                 const uint8_t *same,
                                 const uint32_t *fold,
                                 size_t n_pairs,
                                 uint32_t folds,
                                 double *out);

/**
 * True accept rate at false accept rate `far`; also reports the threshold.
 */
int32_t cf_tar_at_far(const double *pos,
                      size_t n_pos,
                      const double *neg,
                      size_t n_neg,
                      double far,
                      double *tar,
                      double *threshold);

/**
 * Rank-1 identification rate of probe rows against gallery rows.
 */
int32_t cf_rank1(const double *gallery,
                 const uint32_t *gallery_labels,
                 size_t n_gallery,
                 const double *probe,
                 const uint32_t *probe_labels,
                 size_t n_probe,
                 size_t dim,
                 double *out);

/**
 * Generate train and eval splits from a JSON identity spec (NULL or "{}"
 * for defaults).
 */
int32_t cf_dataset_generate(const char *spec_json,
                            struct CfDataset **train,
                            struct CfDataset **eval);

int32_t cf_dataset_load(const char *path, struct CfDataset **out);

int32_t cf_dataset_save(const struct CfDataset *ds, const char *path);

/**
 * Sample count and input dimension.
 */
int32_t cf_dataset_shape(const struct CfDataset *ds, size_t *samples, size_t *input_dim);

/**
 * Copy inputs (`samples * input_dim` values) and labels (`samples`
 * values); either destination may be NULL.
 */
int32_t cf_dataset_copy(const struct CfDataset *ds, double *inputs, uint32_t *labels);

void cf_dataset_free(struct CfDataset *ds);

/**
 * Train on `train` with a JSON configuration (NULL for defaults).
 */
int32_t cf_train(const char *config_json, const struct CfDataset *train, struct CfModel **out);

/**
 * Load a checkpoint; the head's scale, margin and kind come from
 * `config_json` (NULL for defaults).
 */
int32_t cf_model_load(const char *path, const char *config_json, struct CfModel **out);

int32_t cf_model_save(const struct CfModel *model, const char *path);

int32_t cf_model_dims(const struct CfModel *model, size_t *input_dim, size_t *embed_dim);

/**
 * Unit-norm embeddings of `rows` inputs; `out` receives `rows * embed_dim`
 * values.
 */
int32_t cf_model_embed(const struct CfModel *model, const double *inputs, size_t rows, double *out);

void cf_model_free(struct CfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COREFACE_H */
