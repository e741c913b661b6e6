#ifndef SPECMATCH_H
#define SPECMATCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SpmStatus {
  SPM_STATUS_OK = 0,
  // Invalid argument or parameter.
  SPM_STATUS_USAGE = 1,
  // Malformed or inconsistent input data.
  SPM_STATUS_DATA = 2,
  // Solver or factorization failure.
  SPM_STATUS_NUMERICAL = 3,
  // A required pointer was null.
  SPM_STATUS_NULL_POINTER = 4,
  // Internal panic caught at the boundary.
  SPM_STATUS_PANIC = 5,
} SpmStatus;

// Opaque Laplace basis.
typedef struct SpmBasis SpmBasis;

// Opaque triangle mesh.
typedef struct SpmMesh SpmMesh;

// Summary of normalized geodesic errors of `map` against `gt`, both
// pointing into `source`.
typedef struct SpmErrorSummary {
  double mean;
  double percentile95;
  double max;
  size_t unreachable;
} SpmErrorSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *spm_last_error(void);

// Loads an OFF or OBJ file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SpmStatus spm_mesh_load(const char *path, struct SpmMesh **out);

// Builds a mesh from `num_vertices × 3` coordinates and `num_faces × 3`
// vertex indices.
//
// # Safety
// Arrays must hold the stated number of elements; `out` must be valid.
enum SpmStatus spm_mesh_from_arrays(const double *vertices,
                                    size_t num_vertices,
                                    const size_t *faces,
                                    size_t num_faces,
                                    struct SpmMesh **out);

// # Safety
// `mesh` must come from this library and not be used afterwards.
void spm_mesh_free(struct SpmMesh *mesh);

// Vertex count, or 0 for a null handle.
//
// # Safety
// `mesh` must be null or a live handle.
size_t spm_mesh_num_vertices(const struct SpmMesh *mesh);

// Total surface area, or 0 for a null handle.
//
// # Safety
// `mesh` must be null or a live handle.
double spm_mesh_area(const struct SpmMesh *mesh);

// The `k` lowest Laplace–Beltrami eigenpairs (`0 < k < n`).
//
// # Safety
// `mesh` must be a live handle and `out` valid.
enum SpmStatus spm_basis_compute(const struct SpmMesh *mesh, size_t k, struct SpmBasis **out);

// # Safety
// `basis` must come from this library and not be used afterwards.
void spm_basis_free(struct SpmBasis *basis);

// # Safety
// `basis` must be null or a live handle.
size_t spm_basis_k(const struct SpmBasis *basis);

// # Safety
// `basis` must be null or a live handle.
size_t spm_basis_num_vertices(const struct SpmBasis *basis);

// Copies the `k` eigenvalues into `out`.
//
// # Safety
// `out` must hold `len` doubles.
enum SpmStatus spm_basis_eigenvalues(const struct SpmBasis *basis, double *out, size_t len);

// Copies the `n × k` eigenfunctions, row-major, into `out`.
//
// # Safety
// `out` must hold `len` doubles.
enum SpmStatus spm_basis_eigenfunctions(const struct SpmBasis *basis, double *out, size_t len);

// Least-squares map from `k1 × d` coefficients `a1` to `k2 × d`
// coefficients `a2`; writes the `k2 × k1` map to `out`.
//
// # Safety
// Arrays must hold the stated number of elements.
enum SpmStatus spm_fmap_solve(const double *a1,
                              size_t k1,
                              const double *a2,
                              size_t k2,
                              size_t d,
                              double *out);

// Like [`spm_fmap_solve`] with an added Laplacian commutativity term of
// weight `alpha`.
//
// # Safety
// Arrays must hold the stated number of elements.
enum SpmStatus spm_fmap_solve_regularized(const double *a1,
                                          size_t k1,
                                          const double *a2,
                                          size_t k2,
                                          size_t d,
                                          const double *evals1,
                                          const double *evals2,
                                          double alpha,
                                          double *out);

// Point map `T: S2 → S1` from a `k2 × k1` functional map; `out` holds one
// source index per vertex of `basis2`.
//
// # Safety
// `c` must hold `k2 * k1` doubles and `out` `out_len` entries.
enum SpmStatus spm_fmap_to_p2p(const double *c,
                               size_t k2,
                               size_t k1,
                               const struct SpmBasis *basis1,
                               const struct SpmBasis *basis2,
                               size_t *out,
                               size_t out_len);

// Functional map (`k2 × k1`, full basis sizes) induced by a point map.
//
// # Safety
// `map` must hold `map_len` entries and `out` `k2 * k1` doubles.
enum SpmStatus spm_p2p_to_fmap(const size_t *map,
                               size_t map_len,
                               const struct SpmBasis *basis1,
                               const struct SpmBasis *basis2,
                               double *out);

// Spectral ICP on a square `k × k` map. Writes the refined map to `c_out`
// and the point map to `map_out` (one entry per vertex of `basis2`).
//
// # Safety
// Buffers must hold the stated number of elements.
enum SpmStatus spm_icp_refine(const double *c_in,
                              size_t k,
                              const struct SpmBasis *basis1,
                              const struct SpmBasis *basis2,
                              size_t max_iters,
                              double *c_out,
                              size_t *map_out,
                              size_t map_len);

// # Safety
// `map` and `gt` must hold `len` entries; `out` must be valid.
enum SpmStatus spm_geodesic_error(const struct SpmMesh *source,
                                  const size_t *map,
                                  const size_t *gt,
                                  size_t len,
                                  struct SpmErrorSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECMATCH_H */
