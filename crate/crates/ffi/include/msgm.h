#ifndef MSGM_H
#define MSGM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MsgmSdeKind {
  MSGM_SDE_KIND_VE = 0,
  MSGM_SDE_KIND_VP = 1,
} MsgmSdeKind;

/**
 * Result of every fallible call.
 */
typedef enum MsgmStatus {
  MSGM_STATUS_OK = 0,
  MSGM_STATUS_INVALID_ARGUMENT = 1,
  MSGM_STATUS_CONFIG = 2,
  MSGM_STATUS_NUMERICAL = 3,
  MSGM_STATUS_CHECKPOINT = 4,
  MSGM_STATUS_IO = 5,
  MSGM_STATUS_NULL_POINTER = 6,
  MSGM_STATUS_PANIC = 7,
} MsgmStatus;

/**
 * Opaque Gaussian mixture.
 */
typedef struct MsgmMixture MsgmMixture;

/**
 * Opaque trained score network.
 */
typedef struct MsgmNet MsgmNet;

/**
 * Forward SDE schedule. Unused fields of the other kind are ignored.
 */
typedef struct MsgmSdeParams {
  enum MsgmSdeKind kind;
  double t_max;
  double t_eps;
  double sigma_min;
  double sigma_max;
  double beta_min;
  double beta_max;
} MsgmSdeParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *msgm_last_error(void);

/**
 * Default schedule of the given kind.
 */
struct MsgmSdeParams msgm_sde_default(enum MsgmSdeKind kind);

/**
 * Freshly initialized network.
 *
 * # Safety
 * `widths` must point to `n_widths` values; `sde` and `out` must be valid.
 */
enum MsgmStatus msgm_net_init(uint64_t seed,
                              size_t d,
                              const size_t *widths,
                              size_t n_widths,
                              size_t embed_freqs,
                              const struct MsgmSdeParams *sde,
                              struct MsgmNet **out);

/**
 * Network from checkpoint bytes.
 *
 * # Safety
 * `bytes` must point to `len` bytes; `sde` and `out` must be valid.
 */
enum MsgmStatus msgm_net_load(const uint8_t *bytes,
                              size_t len,
                              const struct MsgmSdeParams *sde,
                              struct MsgmNet **out);

/**
 * Network from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `sde` and `out` must be valid.
 */
enum MsgmStatus msgm_net_load_file(const char *path,
                                   const struct MsgmSdeParams *sde,
                                   struct MsgmNet **out);

/**
 * Serializes the network. With a null `buf` only the required size is
 * stored in `written`.
 *
 * # Safety
 * `buf` must hold `cap` bytes when non-null; `net` and `written` must be valid.
 */
enum MsgmStatus msgm_net_save(const struct MsgmNet *net, uint8_t *buf, size_t cap, size_t *written);

/**
 * Input dimension of the network, or 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t msgm_net_dim(const struct MsgmNet *net);

/**
 * `s_θ(x_i, t)` for `n` points, written to `out` (`n × d`).
 *
 * # Safety
 * `x` and `out` must hold `n × d` values.
 */
enum MsgmStatus msgm_net_score(const struct MsgmNet *net,
                               const double *x,
                               size_t n,
                               double t,
                               double *out);

/**
 * Divergence `∇·s_θ(x_i, t)` for `n` points, written to `out` (`n`).
 *
 * # Safety
 * `x` must hold `n × d` values and `out` `n` values.
 */
enum MsgmStatus msgm_net_divergence(const struct MsgmNet *net,
                                    const double *x,
                                    size_t n,
                                    double t,
                                    double *out);

/**
 * `n` reverse-SDE samples written to `out` (`n × d`).
 *
 * # Safety
 * `out` must hold `n × d` values.
 */
enum MsgmStatus msgm_net_sample(const struct MsgmNet *net,
                                size_t n,
                                size_t n_steps,
                                uint64_t seed,
                                double *out);

/**
 * Probability-flow negative log-likelihood (nats) of `n` points.
 *
 * # Safety
 * `x` must hold `n × d` values and `out` `n` values.
 */
enum MsgmStatus msgm_net_nll(const struct MsgmNet *net,
                             const double *x,
                             size_t n,
                             double rtol,
                             double atol,
                             double *out);

/**
 * Releases a network. Null is ignored.
 *
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void msgm_net_free(struct MsgmNet *net);

/**
 * The three-component toy mixture with the centre component flagged.
 *
 * # Safety
 * `out` must be valid.
 */
enum MsgmStatus msgm_mixture_toy(struct MsgmMixture **out);

/**
 * Mixture of `k` components in `d` dimensions. `means` is `k × d`,
 * `covs` is `k × d × d`, `nsfg` holds `k` flags (0 or 1) and may be null.
 *
 * # Safety
 * Buffers must have the stated sizes; `out` must be valid.
 */
enum MsgmStatus msgm_mixture_new(size_t k,
                                 size_t d,
                                 const double *weights,
                                 const double *means,
                                 const double *covs,
                                 const uint8_t *nsfg,
                                 struct MsgmMixture **out);

/**
 * Dimension of the mixture, or 0 for a null handle.
 *
 * # Safety
 * `mix` must be null or a live handle.
 */
size_t msgm_mixture_dim(const struct MsgmMixture *mix);

/**
 * Number of components, or 0 for a null handle.
 *
 * # Safety
 * `mix` must be null or a live handle.
 */
size_t msgm_mixture_components(const struct MsgmMixture *mix);

/**
 * Log density of `n` points.
 *
 * # Safety
 * `x` must hold `n × d` values and `out` `n` values.
 */
enum MsgmStatus msgm_mixture_logpdf(const struct MsgmMixture *mix,
                                    const double *x,
                                    size_t n,
                                    double *out);

/**
 * Bayes-optimal component of `n` points. `posterior` (`n × k`) may be null.
 *
 * # Safety
 * `x` must hold `n × d` values, `component` `n` values and `posterior`,
 * when non-null, `n × k` values.
 */
enum MsgmStatus msgm_mixture_bayes(const struct MsgmMixture *mix,
                                   const double *x,
                                   size_t n,
                                   size_t *component,
                                   double *posterior);

/**
 * `n` draws from the mixture written to `out` (`n × d`).
 *
 * # Safety
 * `out` must hold `n × d` values.
 */
enum MsgmStatus msgm_mixture_sample(const struct MsgmMixture *mix,
                                    size_t n,
                                    uint64_t seed,
                                    double *out);

/**
 * Score of the mixture perturbed to time `t` under `sde`, for `n` points.
 *
 * # Safety
 * `x` and `out` must hold `n × d` values; `sde` must be valid.
 */
enum MsgmStatus msgm_mixture_score(const struct MsgmMixture *mix,
                                   const struct MsgmSdeParams *sde,
                                   const double *x,
                                   size_t n,
                                   double t,
                                   double *out);

/**
 * Fraction of `n` points whose posterior mass on flagged components
 * exceeds `threshold`.
 *
 * # Safety
 * `x` must hold `n × d` values; `out` must be valid.
 */
enum MsgmStatus msgm_unlearning_ratio(const struct MsgmMixture *mix,
                                      const double *x,
                                      size_t n,
                                      double threshold,
                                      double *out);

/**
 * Releases a mixture. Null is ignored.
 *
 * # Safety
 * `mix` must be null or a handle not yet freed.
 */
void msgm_mixture_free(struct MsgmMixture *mix);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSGM_H */
