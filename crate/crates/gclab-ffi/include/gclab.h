/* C ABI for the gclab numerical laboratory.
 *
 * Handles are opaque; create/free pairs own them, every other call borrows.
 * Fallible calls return GclabStatus; on failure gclab_last_error() gives a
 * thread-local message valid until the next failing call. Strings returned
 * by the library are released with gclab_string_free().
 *
 * Maintained by hand alongside crates/gclab-ffi/src/lib.rs.
 */

#ifndef GCLAB_H
#define GCLAB_H

#include <stdint.h>
#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum GclabStatus {
  GCLAB_OK = 0,
  GCLAB_CHECK_FAILED = 1,
  GCLAB_INVALID_CONFIG = 2,
  GCLAB_RANGE_ERROR = 3,
  GCLAB_NULL_POINTER = 4,
  GCLAB_INVALID_UTF8 = 5,
  GCLAB_IO = 6,
} GclabStatus;

typedef struct GclabProblem GclabProblem;
typedef struct GclabSolution GclabSolution;
typedef struct GclabReport GclabReport;

typedef struct GclabEigenCheckSummary {
  double max_first;
  double max_second;
  size_t degenerate_errors;
  int passed;
} GclabEigenCheckSummary;

/* Thread-local message for the last failing call, or NULL. */
const char *gclab_last_error(void);

/* Static version string; do not free. */
const char *gclab_version(void);

/* Manufactured problems: name is one of "aniso-quadratic", "cosh",
 * "radial-quadratic"; the grid covers [-radius, radius]^2 with n_cells cells
 * per axis (even, >= 16). Returns NULL on error. */
GclabProblem *gclab_problem_new(const char *name, double radius, size_t n_cells);
void gclab_problem_free(GclabProblem *problem);

/* Damped Newton solve from a seeded exact-perturbed start. */
GclabStatus gclab_solve(const GclabProblem *problem, uint64_t seed,
                        GclabSolution **out);
void gclab_solution_free(GclabSolution *solution);

double gclab_solution_residual_norm(const GclabSolution *solution);
int gclab_solution_iterations(const GclabSolution *solution);
double gclab_solution_convexity_margin(const GclabSolution *solution);

/* Writes <path_base>.csv (x1,x2,value rows) and <path_base>.json metadata. */
GclabStatus gclab_solution_write_csv(const GclabSolution *solution,
                                     const char *path_base);

/* Interior-bound estimate. Pass m <= 0 / big_m <= 0 to measure the bounds of
 * f over the run's Sigma nodes. */
GclabStatus gclab_estimate(const GclabSolution *solution, double m,
                           double big_m, GclabReport **out);
void gclab_report_free(GclabReport *report);

double gclab_report_phi_max(const GclabReport *report);
double gclab_report_eta_lambda1_max(const GclabReport *report);
double gclab_report_bound_at_origin(const GclabReport *report);
double gclab_report_u_tau_tau_origin(const GclabReport *report);
GclabStatus gclab_report_argmax(const GclabReport *report, double *x1,
                                double *x2, int *rim_adjacent);
/* 1 when u_xixi(0) <= u_tautau(0) <= phi_max / r^{4 beta} held. */
int gclab_report_chain_holds(const GclabReport *report);

/* Full report as JSON; free with gclab_string_free. */
char *gclab_report_json(const GclabReport *report);
void gclab_string_free(char *s);

/* Eigen-derivative verification: formulas against the symmetric-pair
 * finite-difference oracle with step `step`. */
GclabStatus gclab_eigen_check(const size_t *dims, size_t n_dims,
                              size_t matrices_per_dim, double gap_min,
                              double step, uint64_t seed,
                              GclabEigenCheckSummary *out);

#ifdef __cplusplus
}
#endif

#endif /* GCLAB_H */
