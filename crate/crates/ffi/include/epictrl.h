#ifndef EPICTRL_H
#define EPICTRL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum EpictrlStatus {
  EPICTRL_STATUS_OK = 0,
  // A required pointer argument was null.
  EPICTRL_STATUS_NULL_POINTER = 1,
  // An argument or input document was rejected.
  EPICTRL_STATUS_INVALID_ARGUMENT = 2,
  // Integration, factorization or an optimizer failed.
  EPICTRL_STATUS_NUMERICAL_FAILURE = 3,
  // The observer LMIs have no solution or the gains fail verification.
  EPICTRL_STATUS_INFEASIBLE = 4,
  // A file could not be read or written.
  EPICTRL_STATUS_IO = 5,
  // The library panicked; this is a bug.
  EPICTRL_STATUS_PANIC = 6,
} EpictrlStatus;

// Sampled input and output records.
typedef struct EpictrlDataSet EpictrlDataSet;

// A structured model `ẋ = A x + G f(H x, u)`, `y = C x`.
typedef struct EpictrlModel EpictrlModel;

// Verified observer gains with the model they were designed for.
typedef struct EpictrlObserver EpictrlObserver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *epictrl_version(void);

// Message for the last failure on this thread, or an empty string if none
// occurred. The pointer stays valid until the next failure on the same thread.
const char *epictrl_last_error(void);

// Builds the SIDHER model from the 9 parameters
// `(beta, gamma, rho, sigma, xi, lambda, phi, tau, nu)`.
//
// # Safety
// `theta` must point to 9 readable doubles and `out` must be writable.
enum EpictrlStatus epictrl_model_sidher(const double *theta, struct EpictrlModel **out);

// # Safety
// `model` must come from [`epictrl_model_sidher`] and not be freed already; null is ignored.
void epictrl_model_free(struct EpictrlModel *model);

// Writes the state, input and output dimensions.
//
// # Safety
// `model` must be a live handle; the out pointers must be writable.
enum EpictrlStatus epictrl_model_dims(const struct EpictrlModel *model,
                                      size_t *n_x,
                                      size_t *n_u,
                                      size_t *n_y);

// Evaluates `dx = A x + G f(H x, u)`.
//
// # Safety
// `x` and `dx` hold `n_x` doubles, `u` holds `n_u`.
enum EpictrlStatus epictrl_model_rhs(const struct EpictrlModel *model,
                                     const double *x,
                                     const double *u,
                                     double *dx);

// Integrates the model under the nominal input and writes the state at each
// of the `n_times` increasing times, row-major into `states` (`n_times × n_x`).
//
// # Safety
// `x0` holds `n_x` doubles, `times` holds `n_times`, `states` holds `n_times · n_x`.
enum EpictrlStatus epictrl_model_simulate(const struct EpictrlModel *model,
                                          const double *x0,
                                          const double *times,
                                          size_t n_times,
                                          double *states);

// Simulates the model under the nominal input on `[t0, t1]` and samples it
// every `sample_dt` with Gaussian input and output noise drawn from `seed`.
//
// # Safety
// `model` must be a live handle, `x0` holds `n_x` doubles and `out` must be writable.
enum EpictrlStatus epictrl_dataset_generate(const struct EpictrlModel *model,
                                            const double *x0,
                                            double t0,
                                            double t1,
                                            double sample_dt,
                                            double input_noise_std,
                                            double output_noise_std,
                                            uint64_t seed,
                                            struct EpictrlDataSet **out);

// Parses a data set from CSV text with a `t,u1..,y1..` header.
//
// # Safety
// `csv` must be a NUL-terminated string and `out` must be writable.
enum EpictrlStatus epictrl_dataset_from_csv(const char *csv, struct EpictrlDataSet **out);

// Serializes a data set to CSV. Release the string with [`epictrl_string_free`].
//
// # Safety
// `data` must be a live handle and `out` must be writable.
enum EpictrlStatus epictrl_dataset_to_csv(const struct EpictrlDataSet *data, char **out);

// Number of samples, or 0 for a null handle.
//
// # Safety
// `data` must be a live handle or null.
size_t epictrl_dataset_len(const struct EpictrlDataSet *data);

// # Safety
// `data` must come from this library and not be freed already; null is ignored.
void epictrl_dataset_free(struct EpictrlDataSet *data);

// # Safety
// `s` must come from this library and not be freed already; null is ignored.
void epictrl_string_free(char *s);

// Closed-form estimates of `(rho, phi, sigma, xi)` from SIDHER records.
//
// # Safety
// `data` must be a live handle and `rates` must hold 4 doubles.
enum EpictrlStatus epictrl_closed_form_rates(const struct EpictrlDataSet *data, double *rates);

// Solves the observer LMIs for `model` and verifies the gains at `verify_tol`.
// A negative `lipschitz` selects the bound estimated over the state simplex.
//
// # Safety
// `model` must be a live handle and `out` must be writable.
enum EpictrlStatus epictrl_observer_design(const struct EpictrlModel *model,
                                           double lipschitz,
                                           double margin,
                                           double verify_tol,
                                           struct EpictrlObserver **out);

// Copies the output-injection gain `L` (`n_x × n_y`, row-major).
//
// # Safety
// `observer` must be a live handle and `l` must hold `n_x · n_y` doubles.
enum EpictrlStatus epictrl_observer_gain_l(const struct EpictrlObserver *observer, double *l);

// Runs the observer over `data` from `x_hat0` and writes the state estimate
// at the last sample.
//
// # Safety
// `x_hat0` and `x_hat_final` hold `n_x` doubles; handles must be live.
enum EpictrlStatus epictrl_observer_run(const struct EpictrlObserver *observer,
                                        const struct EpictrlDataSet *data,
                                        const double *x_hat0,
                                        double *x_hat_final);

// # Safety
// `observer` must come from this library and not be freed already; null is ignored.
void epictrl_observer_free(struct EpictrlObserver *observer);

// Runs every pipeline stage with the JSON configuration `config_json` (null
// for defaults) into `output_dir`. `exit_code` receives the code the CLI
// would exit with: 0 on success, 2 for invalid input, 3–7 for the failing stage.
//
// # Safety
// `config_json` is null or NUL-terminated, `output_dir` is NUL-terminated and
// `exit_code` must be writable.
enum EpictrlStatus epictrl_pipeline_run(const char *config_json,
                                        const char *output_dir,
                                        int32_t *exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EPICTRL_H */
