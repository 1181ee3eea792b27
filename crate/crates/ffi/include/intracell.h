#ifndef INTRACELL_H
#define INTRACELL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IcStatus {
  IC_STATUS_OK = 0,
  IC_STATUS_NULL_POINTER = 1,
  IC_STATUS_INVALID_ARGUMENT = 2,
  IC_STATUS_INVALID_MODEL = 3,
  IC_STATUS_SINGULAR = 4,
  IC_STATUS_DOMAIN = 5,
  IC_STATUS_IO = 6,
  IC_STATUS_PARSE = 7,
  IC_STATUS_BUFFER_TOO_SMALL = 8,
  IC_STATUS_NUMERICAL = 9,
  IC_STATUS_PANIC = 10,
} IcStatus;

/*
 Opaque model handle.
 */
typedef struct IcModel IcModel;

/*
 Renewal-reward estimate with standard errors.
 */
typedef struct IcRenewalEstimate {
  double v_eff;
  double sigma_eff;
  double v_eff_se;
  double sigma_eff_se;
} IcRenewalEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 The pointer stays valid until the next `ic_*` call on the same thread.
 */
const char *ic_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *ic_version(void);

/*
 Loads a model from a TOML file.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum IcStatus ic_model_from_toml(const char *path, struct IcModel **out);

/*
 Moving/diffusing model: state 0 moves at `c` and leaves at `beta1`,
 state 1 diffuses with `d` and leaves at `beta2`.

 # Safety
 `out` must be a writable pointer.
 */
enum IcStatus ic_model_two_state(double c,
                                 double d,
                                 double beta1,
                                 double beta2,
                                 struct IcModel **out);

/*
 Builds an `n`-state model. `rates` is row-major `n × n` with
 `rates[i * n + j]` the rate from state `j` to state `i`; the diagonal is
 ignored and recomputed so columns sum to zero.

 # Safety
 `speeds` and `diffusivities` must point to `n` values, `rates` to `n * n`,
 and `out` must be writable.
 */
enum IcStatus ic_model_new(size_t n,
                           const double *speeds,
                           const double *diffusivities,
                           const double *rates,
                           struct IcModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from an `ic_model_*` constructor and not be freed twice.
 */
void ic_model_free(struct IcModel *model);

/*
 # Safety
 `model` must be a live handle and `out` writable.
 */
enum IcStatus ic_model_num_states(const struct IcModel *model, size_t *out);

/*
 Writes the stationary distribution into `out[0..n]`.

 # Safety
 `model` must be a live handle and `out` must hold `len` values.
 */
enum IcStatus ic_stationary_distribution(const struct IcModel *model, double *out, size_t len);

/*
 Effective velocity and diffusivity of the homogeneous model.

 # Safety
 `model` must be a live handle; `v_eff` and `sigma_eff` writable.
 */
enum IcStatus ic_effective_transport(const struct IcModel *model, double *v_eff, double *sigma_eff);

/*
 Principal eigenvalue of the Fourier-transformed operator at `nu`.

 # Safety
 `model` must be a live handle and `lambda` writable.
 */
enum IcStatus ic_dispersion_eigenvalue(const struct IcModel *model, double nu, double *lambda);

/*
 Renewal-reward Monte Carlo estimate from `cycles` seeded cycles.

 # Safety
 `model` must be a live handle and `out` writable.
 */
enum IcStatus ic_renewal_estimate(const struct IcModel *model,
                                  uint64_t cycles,
                                  uint64_t seed,
                                  struct IcRenewalEstimate *out);

/*
 Effective transport under an availability table `(x[k], rho[k])` on
 `[0, 1]`, solved on `points` grid points (0 selects the default).
 Binding states are the states with nonzero speed.

 # Safety
 `model` must be a live handle, `x` and `rho` must hold `len` values, and
 `v_eff`, `sigma_eff` must be writable.
 */
enum IcStatus ic_spatial_effective(const struct IcModel *model,
                                   const double *x,
                                   const double *rho,
                                   size_t len,
                                   size_t points,
                                   double *v_eff,
                                   double *sigma_eff);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTRACELL_H */
