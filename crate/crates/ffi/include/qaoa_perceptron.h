#ifndef QAOA_PERCEPTRON_H
#define QAOA_PERCEPTRON_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
enum QpStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  QP_STATUS_OK = 0,
  QP_STATUS_NULL_POINTER = 1,
  QP_STATUS_INVALID_ARGUMENT = 2,
  QP_STATUS_DIMENSION_MISMATCH = 3,
  QP_STATUS_CAPACITY_EXCEEDED = 4,
  QP_STATUS_NO_CONVERGENCE = 5,
  QP_STATUS_IO = 6,
  QP_STATUS_FORMAT = 7,
  QP_STATUS_PANIC = 8,
  QP_STATUS_OTHER = 9,
};
#ifndef __cplusplus
typedef int32_t QpStatus;
#endif // __cplusplus

// Opaque training set.
typedef struct QpInstance QpInstance;

// Opaque energy table.
typedef struct QpTable QpTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *qp_last_error_message(void);

// Random training set of `n_patterns` patterns over `n_spins` spins.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
QpStatus qp_instance_generate(size_t n_spins,
                              size_t n_patterns,
                              uint64_t seed,
                              struct QpInstance **out);

// # Safety
// `path` must be a NUL-terminated string; `out` as in [`qp_instance_generate`].
QpStatus qp_instance_read_json(const char *path, struct QpInstance **out);

// # Safety
// `instance` must be a live handle and `path` a NUL-terminated string.
QpStatus qp_instance_write_json(const struct QpInstance *instance, const char *path);

// # Safety
// `instance` must be a live handle; `n_spins` and `n_patterns` writable.
QpStatus qp_instance_shape(const struct QpInstance *instance, size_t *n_spins, size_t *n_patterns);

// Releases a handle; NULL is ignored.
//
// # Safety
// `instance` must be NULL or a handle not yet freed.
void qp_instance_free(struct QpInstance *instance);

// Energy table of the `nc` cost variant (0 or 1).
//
// # Safety
// `instance` must be a live handle; `out` writable.
QpStatus qp_table_build(const struct QpInstance *instance, uint8_t nc, struct QpTable **out);

// Copy of `table` with its entries permuted by `seed`.
//
// # Safety
// `table` must be a live handle; `out` writable.
QpStatus qp_table_randomize(const struct QpTable *table, uint64_t seed, struct QpTable **out);

// # Safety
// `table` must be a live handle; `n_spins` and `n_solutions` writable.
QpStatus qp_table_info(const struct QpTable *table, size_t *n_spins, size_t *n_solutions);

// # Safety
// `table` must be NULL or a handle not yet freed.
void qp_table_free(struct QpTable *table);

// Energy density and solution probability of the protocol `(betas, gammas)`
// of length `p`. `gradient`, when not NULL, receives `2p` entries: the
// derivatives by each β, then by each γ.
//
// # Safety
// `table` must be a live handle; `betas` and `gammas` must hold `p`
// values; `gradient` must be NULL or hold `2p` values.
QpStatus qp_energy(const struct QpTable *table,
                   const double *betas,
                   const double *gammas,
                   size_t p,
                   double gamma0,
                   double *energy_density,
                   double *ground_overlap,
                   double *gradient);

// BFGS minimization of the energy from `(betas, gammas)`, overwritten in
// place with the optimum.
//
// # Safety
// `table` must be a live handle; `betas` and `gammas` must hold `p`
// writable values; the remaining outputs must be writable.
QpStatus qp_optimize(const struct QpTable *table,
                     double *betas,
                     double *gammas,
                     size_t p,
                     double gamma0,
                     double grad_tol,
                     size_t max_iters,
                     double *energy_density,
                     size_t *n_iters,
                     bool *converged);

// Two lowest eigenvalues of `s H_z + (1 - s) H_x`.
//
// # Safety
// `table` must be a live handle; `ground` and `excited` writable.
QpStatus qp_lowest_two(const struct QpTable *table,
                       double s,
                       double gamma0,
                       double tol,
                       double *ground,
                       double *excited);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QAOA_PERCEPTRON_H */
