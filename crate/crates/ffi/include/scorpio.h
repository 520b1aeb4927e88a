#ifndef SCORPIO_H
#define SCORPIO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Hidden-layer nonlinearity for [`scorpio_model_init_mlp`].
 */
typedef enum ScorpioActivation {
  SCORPIO_ACTIVATION_RELU = 0,
  SCORPIO_ACTIVATION_TANH = 1,
} ScorpioActivation;

typedef enum ScorpioFdScheme {
  SCORPIO_FD_SCHEME_FORWARD = 0,
  SCORPIO_FD_SCHEME_CENTRAL = 1,
} ScorpioFdScheme;

/**
 * Which quantity an attack ascends.
 */
typedef enum ScorpioObjective {
  /**
   * Cross-entropy of the true label.
   */
  SCORPIO_OBJECTIVE_UL = 0,
  /**
   * Negative cross-entropy of a random target.
   */
  SCORPIO_OBJECTIVE_TL = 1,
  /**
   * Negative margin of the true label.
   */
  SCORPIO_OBJECTIVE_UM = 2,
  /**
   * Margin of a random target.
   */
  SCORPIO_OBJECTIVE_TM = 3,
} ScorpioObjective;

/**
 * Result code of every call.
 */
typedef enum ScorpioStatus {
  SCORPIO_STATUS_OK = 0,
  SCORPIO_STATUS_NULL_POINTER = 1,
  SCORPIO_STATUS_INVALID_ARGUMENT = 2,
  SCORPIO_STATUS_UNSUPPORTED_NORM = 3,
  SCORPIO_STATUS_SHAPE_MISMATCH = 4,
  SCORPIO_STATUS_IO = 5,
  SCORPIO_STATUS_CHECKPOINT = 6,
  SCORPIO_STATUS_NON_FINITE = 7,
  SCORPIO_STATUS_PANIC = 8,
} ScorpioStatus;

/**
 * Opaque classifier handle.
 */
typedef struct ScorpioModel ScorpioModel;

/**
 * Attack settings. `p` is the norm order (`INFINITY` for Linf). When `clamp` is nonzero,
 * adversarial inputs are clipped to `[clamp_lo, clamp_hi]`. `fd_step` and `scheme` apply
 * only to the quadratic attack; `seed` draws targets of targeted objectives.
 */
typedef struct ScorpioAttackParams {
  double p;
  double eps;
  size_t steps;
  enum ScorpioObjective objective;
  enum ScorpioFdScheme scheme;
  double fd_step;
  int32_t clamp;
  double clamp_lo;
  double clamp_hi;
  uint64_t seed;
} ScorpioAttackParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * NUL-terminated description of the last failure on this thread, or NULL after a
 * successful call. Valid until the next call on the same thread.
 */
const char *scorpio_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *scorpio_version(void);

/**
 * Load a model checkpoint written by the `scorpio` tool.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScorpioStatus scorpio_model_load(const char *path_, struct ScorpioModel **out);

/**
 * Randomly initialized fully connected network with layer widths `widths[0..n_widths]`.
 *
 * # Safety
 * `widths` must point to `n_widths` values and `out` must be valid.
 */
enum ScorpioStatus scorpio_model_init_mlp(const size_t *widths,
                                          size_t n_widths,
                                          enum ScorpioActivation activation,
                                          uint64_t seed,
                                          struct ScorpioModel **out);

/**
 * # Safety
 * `m` must be NULL or a handle from this library that has not been freed.
 */
void scorpio_model_free(struct ScorpioModel *m);

/**
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated string.
 */
enum ScorpioStatus scorpio_model_save(const struct ScorpioModel *m, const char *path_);

/**
 * Flattened input length; 0 for a NULL handle.
 *
 * # Safety
 * `m` must be NULL or a live handle.
 */
size_t scorpio_model_input_dim(const struct ScorpioModel *m);

/**
 * Number of classes; 0 for a NULL handle.
 *
 * # Safety
 * `m` must be NULL or a live handle.
 */
size_t scorpio_model_num_classes(const struct ScorpioModel *m);

/**
 * Logits of `n` inputs into `out` (`n * num_classes` floats).
 *
 * # Safety
 * `x` must hold `n * input_dim` floats and `out` `out_len` floats.
 */
enum ScorpioStatus scorpio_model_logits(const struct ScorpioModel *m,
                                        const float *x,
                                        size_t n,
                                        float *out,
                                        size_t out_len);

/**
 * Per-example cross-entropy into `loss` (`n` floats) and its input gradient into `grad`
 * (`n * input_dim` floats). Either output may be NULL.
 *
 * # Safety
 * Buffers must have the stated lengths.
 */
enum ScorpioStatus scorpio_model_input_grad(const struct ScorpioModel *m,
                                            const float *x,
                                            const uint32_t *labels,
                                            size_t n,
                                            float *loss,
                                            float *grad);

/**
 * Maximizer of `s . grad` over the ball `||s||_p <= eps` into `out` (`len` doubles).
 * `degenerate` (optional) is set to 1 when the gradient is identically zero.
 *
 * # Safety
 * `grad` and `out` must hold `len` doubles.
 */
enum ScorpioStatus scorpio_fw_oracle(const double *grad,
                                     size_t len,
                                     double p,
                                     double eps,
                                     double *out,
                                     int32_t *degenerate);

/**
 * Frank-Wolfe attack on the quadratic surrogate built from finite-difference
 * Hessian-vector products. Any `p >= 1` is accepted. Writes perturbations into `delta`
 * (`n * input_dim` floats) and adversarial predictions into `pred` (`n` values); either
 * may be NULL.
 *
 * # Safety
 * Buffers must have the stated lengths; `params` must be valid.
 */
enum ScorpioStatus scorpio_attack_quad(const struct ScorpioModel *m,
                                       const float *x,
                                       const uint32_t *labels,
                                       size_t n,
                                       const struct ScorpioAttackParams *params,
                                       float *delta,
                                       uint32_t *pred);

/**
 * Projected gradient attack with default step sizes; `p` must be 2 or `INFINITY`.
 * Outputs as for [`scorpio_attack_quad`].
 *
 * # Safety
 * Buffers must have the stated lengths; `params` must be valid.
 */
enum ScorpioStatus scorpio_attack_pgd(const struct ScorpioModel *m,
                                      const float *x,
                                      const uint32_t *labels,
                                      size_t n,
                                      const struct ScorpioAttackParams *params,
                                      float *delta,
                                      uint32_t *pred);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCORPIO_H */
