/*
 * C API for the continual imitation-learning framework.
 *
 * The library is driven through an opaque experiment handle created from a
 * JSON configuration. Every entry point returns a status code; 0 is success.
 * Detail for the most recent failure is available per handle via
 * ivla_experiment_error(), or process-wide via ivla_last_error() for the
 * handle-free helpers. Returned const char* pointers stay valid until the
 * next call on the same handle (or thread, for ivla_last_error).
 */
#ifndef INFOVLA_C_H
#define INFOVLA_C_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ivla_status {
    IVLA_OK = 0,
    IVLA_ERR = 1,         /* I/O or internal failure */
    IVLA_ERR_CONFIG = 2,  /* invalid configuration or usage */
    IVLA_ERR_NUMERIC = 3  /* NaN/Inf surfaced mid-run */
} ivla_status;

typedef struct ivla_experiment ivla_experiment;

const char* ivla_version(void);

/* Built-in configuration presets: "ci" or "paper". NULL if unknown. */
const char* ivla_preset_json(const char* name);

/* Thread-local message for the last failure of a handle-free helper. */
const char* ivla_last_error(void);

ivla_status ivla_experiment_create(const char* config_json, ivla_experiment** out);
ivla_status ivla_experiment_create_from_file(const char* path, ivla_experiment** out);
void ivla_experiment_destroy(ivla_experiment* exp);

/* Dotted-path override, e.g. ("iterations.base", "50") or
 * ("strategy", "er"). Values parse as JSON when possible. Overrides are
 * re-validated when the experiment runs. */
ivla_status ivla_experiment_set(ivla_experiment* exp, const char* dotted_key, const char* value);

/* Runs every configured seed and writes the run directory. */
ivla_status ivla_experiment_run(ivla_experiment* exp);

/* Runs each named strategy on the identical suite and seeds. */
ivla_status ivla_experiment_compare(ivla_experiment* exp, const char* const* strategies,
                                    size_t n_strategies);

/* Text report (metric table, plus ordering lines for comparisons) from the
 * last successful run/compare on this handle. */
const char* ivla_experiment_report(const ivla_experiment* exp);
const char* ivla_experiment_error(const ivla_experiment* exp);

/* Recomputes metrics from an R.csv file. Writes metrics JSON when
 * metrics_json_out_path is non-NULL; fills table_buf (NUL-terminated,
 * truncating) when provided. */
ivla_status ivla_metrics_from_csv(const char* r_csv_path, const char* metrics_json_out_path,
                                  char* table_buf, size_t table_buf_len);

/* Finite-difference sweep over all autodiff primitives and losses.
 * Returns IVLA_OK iff every check passes at relative error < 1e-4.
 * include_corrupt_fixture != 0 appends a self-test entry that must fail. */
ivla_status ivla_gradcheck(int instances_per_op, int include_corrupt_fixture, char* report_buf,
                           size_t report_buf_len);

#ifdef __cplusplus
}
#endif

#endif /* INFOVLA_C_H */
