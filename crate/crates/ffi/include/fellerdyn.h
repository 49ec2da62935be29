#ifndef FELLERDYN_H
#define FELLERDYN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FdStatus {
  FD_STATUS_OK = 0,
  FD_STATUS_NULL_POINTER = 1,
  FD_STATUS_INVALID_UTF8 = 2,
  FD_STATUS_CONFIG_ERROR = 3,
  FD_STATUS_NUMERIC_ERROR = 4,
  FD_STATUS_PANIC = 5,
} FdStatus;

typedef enum FdVerdict {
  FD_VERDICT_FELLER_DYNKIN = 0,
  FD_VERDICT_NOT_FELLER_DYNKIN = 1,
  FD_VERDICT_INCONCLUSIVE = 2,
} FdVerdict;

// Opaque validated model together with the knobs it was loaded with.
typedef struct FdModel FdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Parses a JSON run configuration (model plus optional knobs) and stores a
// model handle in `*out`.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum FdStatus fd_model_load_json(const char *json, struct FdModel **out);

// Releases a model handle; null is ignored.
//
// # Safety
// `model` must come from `fd_model_load_json` and not be used afterwards.
void fd_model_free(struct FdModel *model);

// Spatial dimension of a loaded model, 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t fd_model_dimension(const struct FdModel *model);

// One-dimensional exact classification.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum FdStatus fd_classify1d(const struct FdModel *model, enum FdVerdict *out);

// Closed-form verdict for birth rates `n^α λ` and death rates `n^α μ`:
// `*out_fd` is true when the chain is Feller-Dynkin.
//
// # Safety
// `out_fd` must be a valid pointer.
enum FdStatus fd_birthdeath_powerlaw(double alpha, double lambda, double mu, bool *out_fd);

// Numerical series verdict for the same chain with `n_terms` terms.
//
// # Safety
// `out` must be a valid pointer.
enum FdStatus fd_birthdeath_rs(double alpha,
                               double lambda,
                               double mu,
                               size_t n_terms,
                               enum FdVerdict *out);

// Runs a command-line subcommand (`"classify1d"`, `"radial"`, ...) on a JSON
// configuration. On success `*out_report` holds the JSON report and
// `*out_exit` the exit code the command-line tool would return.
//
// # Safety
// Strings must be NUL-terminated; output pointers must be valid.
enum FdStatus fd_run_json(const char *command,
                          const char *config_json,
                          char **out_report,
                          int32_t *out_exit);

// Message for the last failed call on this thread; empty after success.
// Valid until the next call on this thread.
const char *fd_last_error_message(void);

// Releases a string returned by this library; null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void fd_string_free(char *s);

// Library version, statically allocated.
const char *fd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FELLERDYN_H */
