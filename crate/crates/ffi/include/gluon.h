#ifndef GLUON_H
#define GLUON_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GluonStatus {
  GLUON_STATUS_OK = 0,
  GLUON_STATUS_NULL_POINTER = 1,
  GLUON_STATUS_INVALID_ARGUMENT = 2,
  GLUON_STATUS_SHAPE_MISMATCH = 3,
  GLUON_STATUS_NUMERICAL = 4,
  GLUON_STATUS_BUFFER_TOO_SMALL = 5,
  GLUON_STATUS_PANIC = 6,
} GluonStatus;

/**
 * Groups collected before the optimizer is built.
 */
typedef struct GluonBuilder GluonBuilder;

/**
 * Opaque optimizer state.
 */
typedef struct GluonOptimizer GluonOptimizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t gluon_last_error_message(char *buf, size_t len);

struct GluonBuilder *gluon_builder_new(void);

/**
 * # Safety
 * `builder` must be null or a pointer from [`gluon_builder_new`] that was
 * not passed to [`gluon_builder_build`].
 */
void gluon_builder_free(struct GluonBuilder *builder);

/**
 * Appends a parameter group. `norm` uses the `family[:scale]` form
 * (`spectral:1.5`, `max:2`, `euclid`) and `schedule` the
 * `constant:T`, `poly:T`, `adaptive:L0:L1` or `adaptive_stoch:L0:L1:Z` form.
 *
 * # Safety
 * `builder` must be a live builder, the strings NUL-terminated, and `data`
 * must point to `rows * cols` readable doubles.
 */
enum GluonStatus gluon_builder_add_group(struct GluonBuilder *builder,
                                         const char *id,
                                         size_t rows,
                                         size_t cols,
                                         const double *data,
                                         const char *norm,
                                         const char *schedule);

/**
 * Consumes the builder and writes a new optimizer to `out`. `momentum` is
 * `none`, `constant:B` or `sqrt`. The builder is freed even on failure.
 *
 * # Safety
 * `builder` must be a live builder and `out` writable.
 */
enum GluonStatus gluon_builder_build(struct GluonBuilder *builder,
                                     const char *momentum,
                                     struct GluonOptimizer **out);

/**
 * # Safety
 * `opt` must be null or a pointer from [`gluon_builder_build`].
 */
void gluon_optimizer_free(struct GluonOptimizer *opt);

/**
 * # Safety
 * `opt` must be a live optimizer.
 */
size_t gluon_optimizer_group_count(const struct GluonOptimizer *opt);

/**
 * # Safety
 * `opt` must be a live optimizer.
 */
uint64_t gluon_optimizer_iteration(const struct GluonOptimizer *opt);

/**
 * # Safety
 * `opt` must be a live optimizer; `rows` and `cols` writable.
 */
enum GluonStatus gluon_optimizer_group_shape(const struct GluonOptimizer *opt,
                                             size_t index,
                                             size_t *rows,
                                             size_t *cols);

/**
 * One step. `grads[i]` points to the row-major gradient of group `i`.
 * With `stochastic` the momentum buffer is updated and drives the LMO.
 * If `radii_out` is non-null it receives one radius per group.
 *
 * # Safety
 * `opt` must be a live optimizer, `grads` must hold `n_groups` pointers each
 * to a buffer of the group's size, and `radii_out` must be null or hold
 * `n_groups` writable doubles.
 */
enum GluonStatus gluon_optimizer_step(struct GluonOptimizer *opt,
                                      const double *const *grads,
                                      size_t n_groups,
                                      bool stochastic,
                                      double *radii_out);

/**
 * Copies group `index`'s parameters into `out`, which holds `len` doubles.
 *
 * # Safety
 * `opt` must be a live optimizer and `out` must hold `len` writable doubles.
 */
enum GluonStatus gluon_optimizer_get_params(const struct GluonOptimizer *opt,
                                            size_t index,
                                            double *out,
                                            size_t len);

/**
 * Writes the LMO direction of `g` under `norm` to `out` (`rows * cols` values).
 *
 * # Safety
 * `norm` must be NUL-terminated; `g` and `out` must hold `rows * cols` doubles.
 */
enum GluonStatus gluon_lmo_direction(const char *norm,
                                     size_t rows,
                                     size_t cols,
                                     const double *g,
                                     double *out);

/**
 * Deterministic iteration count; `weighted` selects the harmonic-mean variant.
 *
 * # Safety
 * `l0` and `l1` must hold `p` doubles; `out` must be writable.
 */
enum GluonStatus gluon_det_iterations(double delta0,
                                      const double *l0,
                                      const double *l1,
                                      size_t p,
                                      double epsilon,
                                      bool weighted,
                                      uint64_t *out);

/**
 * Iteration count under the linear-rate condition with constant `mu`.
 *
 * # Safety
 * `l0` and `l1` must hold `p` doubles; `out` must be writable.
 */
enum GluonStatus gluon_pl_iterations(double delta0,
                                     const double *l0,
                                     const double *l1,
                                     size_t p,
                                     double epsilon,
                                     double mu,
                                     bool l1_zero,
                                     uint64_t *out);

/**
 * Stochastic bound after `k` iterations. With `l1_zero`, `radii` must hold
 * `p` base radii; otherwise it may be null.
 *
 * # Safety
 * `l0`, `l1` and a non-null `radii` must hold `p` doubles; `out` writable.
 */
enum GluonStatus gluon_stoch_bound(uint64_t k,
                                   double delta0,
                                   const double *l0,
                                   const double *l1,
                                   size_t p,
                                   double sigma,
                                   const double *radii,
                                   bool l1_zero,
                                   double *out);

/**
 * Fits `(L0, L1)` to `n` trajectory-smoothness samples.
 *
 * # Safety
 * `l_hat` and `g` must hold `n` doubles; `l0_out` and `l1_out` writable.
 */
enum GluonStatus gluon_fit_constants(const double *l_hat,
                                     const double *g,
                                     size_t n,
                                     double lambda,
                                     double *l0_out,
                                     double *l1_out);

/**
 * Stepsize `g / (L0 + L1 g)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum GluonStatus gluon_suggest_stepsize(double l0, double l1, double g, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLUON_H */
