#ifndef PSWEIGHT_H
#define PSWEIGHT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PswScheme {
  PSW_SCHEME_UNWEIGHTED = 0,
  /**
   * Inverse probability (combined population).
   */
  PSW_SCHEME_HT = 1,
  PSW_SCHEME_ATT = 2,
  PSW_SCHEME_ATC = 3,
  /**
   * Uses the `alpha` argument.
   */
  PSW_SCHEME_TRUNCATED = 4,
  PSW_SCHEME_OVERLAP = 5,
} PswScheme;

typedef enum PswStatus {
  PSW_STATUS_OK = 0,
  PSW_STATUS_NULL_POINTER = 1,
  PSW_STATUS_INVALID_ARGUMENT = 2,
  PSW_STATUS_DATA_ERROR = 3,
  PSW_STATUS_FIT_ERROR = 4,
  /**
   * The fit finished but probabilities reached 0 or 1; the model is
   * still returned.
   */
  PSW_STATUS_SEPARATION = 5,
  PSW_STATUS_WEIGHT_ERROR = 6,
  PSW_STATUS_EMPTY_TARGET_POPULATION = 7,
  PSW_STATUS_ESTIMATE_ERROR = 8,
  PSW_STATUS_BUFFER_TOO_SMALL = 9,
  PSW_STATUS_PANIC = 10,
} PswStatus;

/**
 * Opaque dataset handle.
 */
typedef struct PswDataset PswDataset;

/**
 * Opaque fitted propensity model.
 */
typedef struct PswModel PswModel;

/**
 * Opaque weight vector with its scheme.
 */
typedef struct PswWeights PswWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Free with
 * [`psw_string_free`].
 */
char *psw_last_error_message(void);

/**
 * # Safety
 * `s` must come from [`psw_last_error_message`] or be NULL.
 */
void psw_string_free(char *s);

/**
 * Builds a dataset from `n` units and `k` covariates stored row-major in
 * `covariates` (`n * k` values). `treatment` holds 0/1 bytes; `outcome`
 * may be NULL. Covariates are named `x1..xk`.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes; `out` must be valid
 * for writing.
 */
enum PswStatus psw_dataset_new(size_t n,
                               const uint8_t *treatment,
                               const double *outcome,
                               size_t k,
                               const double *covariates,
                               struct PswDataset **out);

/**
 * # Safety
 * `data` must come from [`psw_dataset_new`] or be NULL.
 */
void psw_dataset_free(struct PswDataset *data);

/**
 * Logistic maximum-likelihood fit on all covariates. On
 * `PswStatus::Separation` the model is still written to `out`.
 *
 * # Safety
 * `data` must be a live dataset handle; `out` must be valid for writing.
 */
enum PswStatus psw_model_fit(const struct PswDataset *data, struct PswModel **out);

/**
 * # Safety
 * `model` must come from [`psw_model_fit`] or be NULL.
 */
void psw_model_free(struct PswModel *model);

/**
 * Number of coefficients (intercept plus slopes); 0 for NULL.
 *
 * # Safety
 * `model` must be a live model handle or NULL.
 */
size_t psw_model_n_coefficients(const struct PswModel *model);

/**
 * Copies the coefficients, intercept first, into `buf`.
 *
 * # Safety
 * `model` must be live; `buf` must hold `len` doubles.
 */
enum PswStatus psw_model_coefficients(const struct PswModel *model, double *buf, size_t len);

/**
 * Copies the fitted propensity scores into `buf`.
 *
 * # Safety
 * `model` must be live; `buf` must hold `len` doubles.
 */
enum PswStatus psw_model_scores(const struct PswModel *model, double *buf, size_t len);

/**
 * Balancing weights for `scheme`; `alpha` is used only by
 * `PswScheme::Truncated`.
 *
 * # Safety
 * Handles must be live and belong to the same data; `out` must be valid.
 */
enum PswStatus psw_weights_compute(const struct PswModel *model,
                                   const struct PswDataset *data,
                                   enum PswScheme scheme,
                                   double alpha,
                                   struct PswWeights **out);

/**
 * # Safety
 * `weights` must come from [`psw_weights_compute`] or be NULL.
 */
void psw_weights_free(struct PswWeights *weights);

/**
 * Unnormalized per-unit weights.
 *
 * # Safety
 * `weights` must be live; `buf` must hold `len` doubles.
 */
enum PswStatus psw_weights_raw(const struct PswWeights *weights, double *buf, size_t len);

/**
 * Weights normalized to sum to one within each group.
 *
 * # Safety
 * `weights` must be live; `buf` must hold `len` doubles.
 */
enum PswStatus psw_weights_normalized(const struct PswWeights *weights, double *buf, size_t len);

/**
 * Weighted difference of group mean outcomes.
 *
 * # Safety
 * Handles must be live; `out` must be valid for writing.
 */
enum PswStatus psw_wate(const struct PswDataset *data,
                        const struct PswWeights *weights,
                        double *out);

/**
 * Largest absolute standardized bias over the covariates.
 *
 * # Safety
 * Handles must be live; `out` must be valid for writing.
 */
enum PswStatus psw_max_asb(const struct PswDataset *data,
                           const struct PswWeights *weights,
                           double *out);

/**
 * Design-effect variance inflation of the weights (1 for constant weights).
 *
 * # Safety
 * `weights` must be live; `out` must be valid for writing.
 */
enum PswStatus psw_variance_inflation(const struct PswWeights *weights, double *out);

/**
 * Asymptotic variance relative to the unweighted difference of means for
 * normal covariate densities N(mu1, sd1^2) and N(mu0, sd0^2) with group size
 * ratio n0/n1 = `size_ratio`. Divergent integrals give +infinity.
 *
 * # Safety
 * `out` must be valid for writing.
 */
enum PswStatus psw_relative_variance_normal(double mu1,
                                            double sd1,
                                            double mu0,
                                            double sd0,
                                            double size_ratio,
                                            enum PswScheme scheme,
                                            double alpha,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSWEIGHT_H */
