#ifndef CONGRAD_H
#define CONGRAD_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CgStatus {
  CG_STATUS_OK = 0,
  CG_STATUS_NULL_POINTER = 1,
  CG_STATUS_INVALID_ARGUMENT = 2,
  CG_STATUS_SHAPE_MISMATCH = 3,
  CG_STATUS_NON_FINITE = 4,
  CG_STATUS_EMPTY_STORE = 5,
  CG_STATUS_BUFFER_TOO_SMALL = 6,
  CG_STATUS_PANIC = 7,
} CgStatus;

/**
 * Single-matrix gradient EMA handle.
 */
typedef struct CgGradStore CgGradStore;

/**
 * Toy policy handle.
 */
typedef struct CgPolicy CgPolicy;

/**
 * A preference pair as seen through the C ABI.
 */
typedef struct CgPair {
  size_t prompt_id;
  const uint32_t *chosen;
  size_t chosen_len;
  const uint32_t *rejected;
  size_t rejected_len;
} CgPair;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t cg_last_error_message(char *buf, size_t cap);

/**
 * Cosine similarity of two length-`n` vectors; 0 if either is zero.
 *
 * # Safety
 * `a` and `b` must point to `n` doubles; `out` must be writable.
 */
enum CgStatus cg_cosine(const double *a, const double *b, size_t n, double *out);

/**
 * Rank-`rank` approximation of a `rows`×`cols` matrix by seeded power
 * iteration, written densely to `out`.
 *
 * # Safety
 * `m` and `out` must each point to `rows*cols` doubles.
 */
enum CgStatus cg_power_iterate(const double *m,
                               size_t rows,
                               size_t cols,
                               size_t rank,
                               size_t iters,
                               uint64_t seed,
                               double *out);

/**
 * De-conflicted sum of `k` task gradients of length `n`, stacked row-major
 * in `grads`.
 *
 * # Safety
 * `grads` must point to `k*n` doubles and `out` to `n` doubles.
 */
enum CgStatus cg_consensus(const double *grads,
                           size_t k,
                           size_t n,
                           uint64_t order_seed,
                           double *out);

/**
 * Keep the top (`keep_max` nonzero) or bottom `ceil(rho*n)` of `n` scores.
 * Ties go to the lower index. `mask[i]` is set to 1 for kept samples.
 *
 * # Safety
 * `scores` must point to `n` doubles and `mask` to `n` bytes.
 */
enum CgStatus cg_select(const double *scores,
                        size_t n,
                        double rho,
                        int32_t keep_max,
                        uint8_t *mask);

/**
 * New toy policy with Gaussian logits.
 *
 * # Safety
 * `out` must be writable; the handle it receives is released with
 * [`cg_policy_free`].
 */
enum CgStatus cg_policy_new(size_t num_prompts,
                            size_t vocab_size,
                            size_t max_len,
                            double std,
                            uint64_t seed,
                            struct CgPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from [`cg_policy_new`] not yet freed.
 */
void cg_policy_free(struct CgPolicy *policy);

/**
 * Number of parameters, i.e. the gradient length.
 *
 * # Safety
 * `policy` must be a live handle; `out` must be writable.
 */
enum CgStatus cg_policy_num_params(const struct CgPolicy *policy, size_t *out);

/**
 * Log-probability of `tokens` given `prompt_id`.
 *
 * # Safety
 * `policy` must be a live handle, `tokens` must point to `len` tokens and
 * `out` must be writable.
 */
enum CgStatus cg_policy_log_prob(const struct CgPolicy *policy,
                                 size_t prompt_id,
                                 const uint32_t *tokens,
                                 size_t len,
                                 double *out);

/**
 * Length-penalized DPO loss of `pair` under `policy` against `reference`.
 *
 * # Safety
 * Both handles must be live, `pair` must be valid and `out` writable.
 */
enum CgStatus cg_lp_dpo_loss(const struct CgPolicy *policy,
                             const struct CgPolicy *reference,
                             const struct CgPair *pair_ptr,
                             double beta,
                             double alpha,
                             double *out);

/**
 * Exact gradient of [`cg_lp_dpo_loss`] with respect to the policy
 * parameters, written to `out` of length [`cg_policy_num_params`].
 *
 * # Safety
 * Both handles must be live, `pair` must be valid and `out` must point to
 * `out_len` doubles.
 */
enum CgStatus cg_lp_dpo_gradient(const struct CgPolicy *policy,
                                 const struct CgPolicy *reference,
                                 const struct CgPair *pair_ptr,
                                 double beta,
                                 double alpha,
                                 double *out,
                                 size_t out_len);

/**
 * Gradient EMA for one `rows`×`cols` parameter matrix, stored at rank
 * `min(rank, rows, cols)`.
 *
 * # Safety
 * `out` must be writable; the handle it receives is released with
 * [`cg_store_free`].
 */
enum CgStatus cg_store_new(size_t rows,
                           size_t cols,
                           size_t rank,
                           double gamma,
                           size_t power_iters,
                           uint64_t seed,
                           struct CgGradStore **out);

/**
 * # Safety
 * `store` must be null or a handle from [`cg_store_new`] not yet freed.
 */
void cg_store_free(struct CgGradStore *store);

/**
 * Fold one gradient of `len == rows*cols` values into the EMA.
 *
 * # Safety
 * `store` must be a live handle not used concurrently; `grad` must point to
 * `len` doubles.
 */
enum CgStatus cg_store_update(struct CgGradStore *store, const double *grad, size_t len);

/**
 * Number of updates applied so far.
 *
 * # Safety
 * `store` must be a live handle; `out` must be writable.
 */
enum CgStatus cg_store_step(const struct CgGradStore *store, uint64_t *out);

/**
 * Dense reconstruction of the current EMA, row-major.
 *
 * # Safety
 * `store` must be a live handle; `out` must point to `len` doubles.
 */
enum CgStatus cg_store_snapshot(const struct CgGradStore *store, double *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONGRAD_H */
