#ifndef D2IBC_H
#define D2IBC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; nonzero values match the CLI exit codes where applicable.
 */
typedef enum D2ibcStatus {
  Ok = 0,
  ErrOther = 1,
  ErrConfig = 2,
  ErrData = 3,
  ErrAssumption = 4,
  ErrBound = 5,
  ErrNullArg = 6,
} D2ibcStatus;

/**
 * Opaque handle to a one-step regression model.
 */
typedef struct D2ibcModel D2ibcModel;

/**
 * Opaque handle to the nonlinear inversion controller.
 */
typedef struct D2ibcNic D2ibcNic;

/**
 * Opaque handle to the extended PID controller (stateful).
 */
typedef struct D2ibcPid D2ibcPid;

/**
 * Opaque handle to an input/output data record.
 */
typedef struct D2ibcRecord D2ibcRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the message for the most recent error on this thread into `buf`
 * (NUL-terminated, truncated to `cap`). Returns the full message length.
 */
size_t d2ibc_last_error(char *buf, size_t cap);

/**
 * Library version as a static string; never freed by the caller.
 */
const char *d2ibc_version(void);

/**
 * Release a string returned by this library.
 */
void d2ibc_string_free(char *s);

/**
 * Build a record from parallel input/output arrays of length `len`.
 */
enum D2ibcStatus d2ibc_record_new(const double *u,
                                  const double *y,
                                  size_t len,
                                  struct D2ibcRecord **out);

/**
 * Load a record from a `t,u,y` CSV file.
 */
enum D2ibcStatus d2ibc_record_load(const char *path, struct D2ibcRecord **out);

size_t d2ibc_record_len(const struct D2ibcRecord *record);

void d2ibc_record_free(struct D2ibcRecord *record);

/**
 * Identify a polynomial one-step model of order `n` and total degree
 * `degree` from a record. Set `affine_in_u` nonzero to restrict the model
 * to terms affine in the current input.
 */
enum D2ibcStatus d2ibc_model_identify(const struct D2ibcRecord *record,
                                      size_t n,
                                      uint32_t degree,
                                      double ridge,
                                      int32_t affine_in_u,
                                      struct D2ibcModel **out);

enum D2ibcStatus d2ibc_model_from_json(const char *json, struct D2ibcModel **out);

/**
 * Serialize the model; free the result with `d2ibc_string_free`.
 */
enum D2ibcStatus d2ibc_model_to_json(const struct D2ibcModel *model, char **out);

/**
 * One-step prediction. `q` holds the regressor entries
 * (y_t..y_{t-n+1}, u_{t-1}..u_{t-n+1}), so `q_len` must be `2n - 1`.
 */
enum D2ibcStatus d2ibc_model_predict(const struct D2ibcModel *model,
                                     const double *q,
                                     size_t q_len,
                                     double u,
                                     double *y_next);

void d2ibc_model_free(struct D2ibcModel *model);

/**
 * Build the inversion controller from a model and the record that sets the
 * normalization constants. Inputs are clipped into `[u_min, u_max]`.
 */
enum D2ibcStatus d2ibc_nic_new(const struct D2ibcModel *model,
                               const struct D2ibcRecord *record,
                               double mu,
                               double u_min,
                               double u_max,
                               struct D2ibcNic **out);

/**
 * Solve the one-step command problem for regressor `q` (length `2n - 1`)
 * and next reference sample `r_next`.
 */
enum D2ibcStatus d2ibc_nic_solve(const struct D2ibcNic *nic,
                                 const double *q,
                                 size_t q_len,
                                 double r_next,
                                 double *u_out);

/**
 * Serialize the controller; free the result with `d2ibc_string_free`.
 */
enum D2ibcStatus d2ibc_nic_to_json(const struct D2ibcNic *nic, char **out);

void d2ibc_nic_free(struct D2ibcNic *nic);

enum D2ibcStatus d2ibc_pid_new(const double *theta, size_t theta_len, struct D2ibcPid **out);

/**
 * Advance the controller one step with tracking error `e` and return the
 * accumulated command.
 */
enum D2ibcStatus d2ibc_pid_step(struct D2ibcPid *pid, double e, double *u_out);

void d2ibc_pid_reset(struct D2ibcPid *pid);

void d2ibc_pid_free(struct D2ibcPid *pid);

/**
 * Virtual-reference design of the PID on a record, against a first-order
 * reference model with pole `lambda`. A controller of order `order` has
 * `order + 1` parameters, so `theta_cap` must be at least `order + 1`;
 * exactly that many are written on success, plus the squared fit residual.
 */
enum D2ibcStatus d2ibc_design_pid(const struct D2ibcRecord *record,
                                  const struct D2ibcNic *nic,
                                  double lambda,
                                  size_t order,
                                  double *theta_out,
                                  size_t theta_cap,
                                  double *residual_out);

/**
 * Run the full pipeline: parse the TOML config text and write every
 * artifact into `out_dir`. Pass NULL config for the built-in demo setup.
 */
enum D2ibcStatus d2ibc_run_pipeline(const char *config_toml, const char *out_dir);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* D2IBC_H */
