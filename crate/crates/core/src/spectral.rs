//! Cotangent Laplace–Beltrami operator and its truncated eigenbasis.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::eigen::{self, EigenOptions};
use crate::error::{check_dim, Error, Result};
use crate::io;
use crate::mesh::TriangleMesh;

pub const DEFAULT_K: usize = 120;
const MAX_COTANGENT: f64 = 1e8;

/// Stiffness matrix `W` with `W_ij = −(cot α_ij + cot β_ij)/2` off the diagonal
/// and rows summing to zero. Positive semidefinite.
pub fn cotan_laplacian(mesh: &TriangleMesh) -> CsMat<f64> {
    let n = mesh.num_vertices();
    let mut tri = TriMat::with_capacity((n, n), mesh.num_faces() * 12);
    let mut clamped = 0usize;
    for (fi, f) in mesh.faces().iter().enumerate() {
        let p = mesh.corners(fi);
        for corner in 0..3 {
            let (i, j) = ((corner + 1) % 3, (corner + 2) % 3);
            let a = p[i] - p[corner];
            let b = p[j] - p[corner];
            let mut cot = a.dot(&b) / a.cross(&b).norm();
            if !cot.is_finite() || cot.abs() > MAX_COTANGENT {
                clamped += 1;
                cot = if cot.is_nan() { 0.0 } else { cot.clamp(-MAX_COTANGENT, MAX_COTANGENT) };
            }
            let w = 0.5 * cot;
            let (vi, vj) = (f[i], f[j]);
            tri.add_triplet(vi, vj, -w);
            tri.add_triplet(vj, vi, -w);
            tri.add_triplet(vi, vi, w);
            tri.add_triplet(vj, vj, w);
        }
    }
    if clamped > 0 {
        log::warn!(
            "mesh '{}': clamped {clamped} cotangent weights of near-degenerate angles",
            mesh.name()
        );
    }
    // duplicate triplets are summed on conversion
    tri.to_csr()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceBasis {
    eigenvalues: Vec<f64>,
    /// `n × k`
    eigenfunctions: DMatrix<f64>,
    mass: Vec<f64>,
    mesh_hash: String,
}

#[derive(Serialize, Deserialize)]
struct BasisHeader {
    kind: String,
    n: usize,
    k: usize,
    mesh_hash: String,
}

impl LaplaceBasis {
    pub fn from_parts(
        eigenvalues: Vec<f64>,
        eigenfunctions: DMatrix<f64>,
        mass: Vec<f64>,
        mesh_hash: impl Into<String>,
    ) -> Result<Self> {
        check_dim("eigenvalues vs eigenfunction columns", eigenfunctions.ncols(), eigenvalues.len())?;
        check_dim("mass vs eigenfunction rows", eigenfunctions.nrows(), mass.len())?;
        Ok(LaplaceBasis {
            eigenvalues,
            eigenfunctions,
            mass,
            mesh_hash: mesh_hash.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.mass.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn mesh_hash(&self) -> &str {
        &self.mesh_hash
    }

    pub fn total_area(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// First `k` modes.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidParameter(format!(
                "cannot truncate a {}-mode basis to {k}",
                self.k()
            )));
        }
        Ok(LaplaceBasis {
            eigenvalues: self.eigenvalues[..k].to_vec(),
            eigenfunctions: self.eigenfunctions.columns(0, k).into_owned(),
            mass: self.mass.clone(),
            mesh_hash: self.mesh_hash.clone(),
        })
    }

    /// `Φᵀ M`, the M-weighted pseudoinverse (`k × n`).
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let mut p = self.eigenfunctions.transpose();
        for (c, m) in self.mass.iter().enumerate() {
            p.column_mut(c).scale_mut(*m);
        }
        p
    }

    /// Spectral coefficients `Φᵀ M f`.
    pub fn project(&self, f: &[f64]) -> Result<DVector<f64>> {
        check_dim("project", self.num_vertices(), f.len())?;
        let weighted = DVector::from_iterator(f.len(), f.iter().zip(&self.mass).map(|(a, m)| a * m));
        Ok(self.eigenfunctions.transpose() * weighted)
    }

    /// Projects every column of an `n × d` matrix; returns `k × d`.
    pub fn project_columns(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("project_columns", self.num_vertices(), values.nrows())?;
        let mut weighted = values.clone();
        for (r, m) in self.mass.iter().enumerate() {
            weighted.row_mut(r).scale_mut(*m);
        }
        Ok(self.eigenfunctions.transpose() * weighted)
    }

    /// Per-vertex values `Φ a`.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<DVector<f64>> {
        check_dim("reconstruct", self.k(), coeffs.len())?;
        Ok(&self.eigenfunctions * DVector::from_column_slice(coeffs))
    }

    /// Rows of `Φ` at the given vertices together with the pseudoinverse of
    /// that restricted basis under the restricted masses,
    /// `(Φ_sᵀ M_s Φ_s)⁻¹ Φ_sᵀ M_s`. With every vertex selected this is `Φᵀ M`.
    pub fn restricted(&self, vertices: &[usize]) -> Result<RestrictedBasis> {
        let k = self.k();
        let rows = DMatrix::from_fn(vertices.len(), k, |r, c| self.eigenfunctions[(vertices[r], c)]);
        let mut weighted_t = rows.transpose();
        for (c, &v) in vertices.iter().enumerate() {
            weighted_t.column_mut(c).scale_mut(self.mass[v]);
        }
        let gram = &weighted_t * &rows;
        let chol = nalgebra::Cholesky::new(gram.clone()).ok_or_else(|| {
            Error::Numerical(format!(
                "restricted basis Gram matrix is singular ({} samples, k = {k})",
                vertices.len()
            ))
        })?;
        let pinv = chol.solve(&weighted_t);
        Ok(RestrictedBasis { rows, pinv })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = BasisHeader {
            kind: "laplace_basis".into(),
            n: self.num_vertices(),
            k: self.k(),
            mesh_hash: self.mesh_hash.clone(),
        };
        let n = self.num_vertices();
        let k = self.k();
        let mut payload = Vec::with_capacity(k + n * k + n);
        payload.extend_from_slice(&self.eigenvalues);
        // row-major n × k
        for r in 0..n {
            for c in 0..k {
                payload.push(self.eigenfunctions[(r, c)]);
            }
        }
        payload.extend_from_slice(&self.mass);
        io::write_container(path, &header, &payload)
    }

    /// Loads a cached basis. With `expected_hash` set, a cache computed from a
    /// different mesh is rejected.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let (header, payload): (BasisHeader, Vec<f64>) = io::read_container(path)?;
        if header.kind != "laplace_basis" {
            return Err(Error::InvalidData(format!("{} is not a basis cache", path.display())));
        }
        if let Some(h) = expected_hash {
            if h != header.mesh_hash {
                return Err(Error::StaleCache {
                    path: path.to_path_buf(),
                    reason: "mesh content hash differs".into(),
                });
            }
        }
        let (n, k) = (header.n, header.k);
        if payload.len() != k + n * k + n {
            return Err(Error::InvalidData(format!("{}: payload size mismatch", path.display())));
        }
        let eigenvalues = payload[..k].to_vec();
        let eigenfunctions = DMatrix::from_row_slice(n, k, &payload[k..k + n * k]);
        let mass = payload[k + n * k..].to_vec();
        LaplaceBasis::from_parts(eigenvalues, eigenfunctions, mass, header.mesh_hash)
    }
}

/// Basis rows at a vertex subset and their least-squares pseudoinverse.
#[derive(Debug, Clone)]
pub struct RestrictedBasis {
    /// `s × k`
    pub rows: DMatrix<f64>,
    /// `k × s`
    pub pinv: DMatrix<f64>,
}

/// Largest-magnitude entry of each column made positive.
fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

/// A numerically constant first mode is replaced by the exact constant
/// `1/√area`, so that ties between vertices are genuine ties.
fn snap_constant_mode(mass: &[f64], vectors: &mut DMatrix<f64>) {
    if vectors.ncols() == 0 {
        return;
    }
    let c = 1.0 / mass.iter().sum::<f64>().sqrt();
    let mut col = vectors.column_mut(0);
    if col.iter().all(|v| (v - c).abs() <= 1e-6 * c) {
        col.fill(c);
    }
}

fn finalize(
    mesh: &TriangleMesh,
    mass: Vec<f64>,
    mut values: Vec<f64>,
    mut vectors: DMatrix<f64>,
) -> Result<LaplaceBasis> {
    let top = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for v in &mut values {
        if *v < 0.0 {
            if *v < -1e-8 * top.max(1.0) {
                return Err(Error::Numerical(format!("negative Laplacian eigenvalue {v}")));
            }
            *v = 0.0;
        }
    }
    fix_signs(&mut vectors);
    snap_constant_mode(&mass, &mut vectors);
    LaplaceBasis::from_parts(values, vectors, mass, mesh.content_hash())
}

/// The `k` smallest eigenpairs of `W φ = λ M φ` with lumped mass.
pub fn compute_basis(mesh: &TriangleMesh, k: usize) -> Result<LaplaceBasis> {
    compute_basis_with(mesh, k, &EigenOptions::default())
}

pub fn compute_basis_with(mesh: &TriangleMesh, k: usize, opts: &EigenOptions) -> Result<LaplaceBasis> {
    let n = mesh.num_vertices();
    if k == 0 || k >= n {
        return Err(Error::InvalidParameter(format!(
            "basis size k = {k} must satisfy 0 < k < n = {n}"
        )));
    }
    let stiffness = cotan_laplacian(mesh);
    let mass = mesh.vertex_areas();
    if mass.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::InvalidMesh(format!(
            "mesh '{}' has vertices not referenced by any face",
            mesh.name()
        )));
    }
    let result = eigen::smallest_eigenpairs(&stiffness, &mass, k, opts)?;
    finalize(mesh, mass, result.values, result.vectors)
}

/// All `n` eigenpairs (dense). Only sensible for small meshes; used when a
/// complete basis is needed.
pub fn complete_basis(mesh: &TriangleMesh) -> Result<LaplaceBasis> {
    let stiffness = cotan_laplacian(mesh);
    let mass = mesh.vertex_areas();
    let result = eigen::dense_smallest(&stiffness, &mass, mesh.num_vertices())?;
    finalize(mesh, mass, result.values, result.vectors)
}

/// `max_i ‖W φ_i − λ_i M φ_i‖ / ‖M φ_i‖`.
pub fn eigen_residual(mesh: &TriangleMesh, basis: &LaplaceBasis) -> f64 {
    let stiffness = cotan_laplacian(mesh);
    let mut worst: f64 = 0.0;
    for (i, &lambda) in basis.eigenvalues().iter().enumerate() {
        let phi: Vec<f64> = basis.eigenfunctions().column(i).iter().copied().collect();
        let w_phi = eigen::spmv(&stiffness, &phi);
        let mut num = 0.0;
        let mut den = 0.0;
        for ((wp, p), m) in w_phi.iter().zip(&phi).zip(basis.mass()) {
            num += (wp - lambda * m * p).powi(2);
            den += (m * p).powi(2);
        }
        worst = worst.max((num / den).sqrt());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn dense(w: &CsMat<f64>) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(w.rows(), w.cols());
        for (v, (r, c)) in w.iter() {
            d[(r, c)] += v;
        }
        d
    }

    #[test]
    fn equilateral_cotan_weights() {
        let w = dense(&cotan_laplacian(&synthetic::equilateral_triangle(1.0)));
        let expected = -1.0 / (2.0 * 3f64.sqrt());
        assert!((expected + 0.28868).abs() < 1e-5);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((w[(i, j)] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn right_angle_edge_has_zero_weight() {
        let w = dense(&cotan_laplacian(&synthetic::right_isoceles_triangle()));
        assert!(w[(1, 2)].abs() < 1e-15);
        assert!(w[(2, 1)].abs() < 1e-15);
    }

    #[test]
    fn rows_sum_to_zero() {
        let mesh = synthetic::bumpy_sphere(2, 0.3, 5);
        let w = cotan_laplacian(&mesh);
        let ones = vec![1.0; mesh.num_vertices()];
        for v in eigen::spmv(&w, &ones) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_k_not_below_n() {
        let tet = synthetic::regular_tetrahedron(1.0);
        assert!(matches!(compute_basis(&tet, 4), Err(Error::InvalidParameter(_))));
        assert!(compute_basis(&tet, 3).is_ok());
    }

    #[test]
    fn constant_first_mode() {
        let mesh = synthetic::bumpy_sphere(2, 0.3, 9);
        let basis = compute_basis(&mesh, 10).unwrap();
        let area = mesh.total_area();
        assert!(basis.eigenvalues()[0] <= 1e-6 * basis.eigenvalues()[9]);
        for v in basis.eigenfunctions().column(0).iter() {
            assert!((v - 1.0 / area.sqrt()).abs() < 1e-8);
        }
    }

    #[test]
    fn project_reconstruct_identities() {
        let mesh = synthetic::bumpy_sphere(2, 0.3, 2);
        let basis = compute_basis(&mesh, 8).unwrap();
        let phi = basis.eigenfunctions();
        let col3: Vec<f64> = phi.column(3).iter().copied().collect();
        let a = basis.project(&col3).unwrap();
        for (i, v) in a.iter().enumerate() {
            let e = if i == 3 { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-8);
        }
        let zero = basis.project(&vec![0.0; mesh.num_vertices()]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        let combo: Vec<f64> = (0..mesh.num_vertices())
            .map(|r| 2.0 * phi[(r, 0)] - phi[(r, 1)])
            .collect();
        let a = basis.project(&combo).unwrap();
        assert!((a[0] - 2.0).abs() < 1e-8 && (a[1] + 1.0).abs() < 1e-8);
        assert!(a.iter().skip(2).all(|v| v.abs() < 1e-8));

        let coeffs = [0.3, -1.0, 0.5, 2.0, 0.0, 0.1, -0.2, 0.7];
        let f = basis.reconstruct(&coeffs).unwrap();
        let back = basis.project(f.as_slice()).unwrap();
        for (x, y) in back.iter().zip(coeffs) {
            assert!((x - y).abs() < 1e-8);
        }
        let again = basis.reconstruct(back.as_slice()).unwrap();
        assert!((again - f).norm() < 1e-8);

        assert!(basis.project(&[1.0, 2.0]).is_err());
        assert!(basis.reconstruct(&[1.0]).is_err());
    }

    #[test]
    fn restricted_pinv_with_all_vertices_is_full_pinv() {
        let mesh = synthetic::bumpy_sphere(1, 0.2, 4);
        let basis = compute_basis(&mesh, 6).unwrap();
        let all: Vec<usize> = (0..mesh.num_vertices()).collect();
        let r = basis.restricted(&all).unwrap();
        assert!((r.pinv - basis.pseudo_inverse()).norm() < 1e-9);
    }

    #[test]
    fn cache_round_trip_and_hash_check() {
        let mesh = synthetic::bumpy_sphere(1, 0.2, 4);
        let basis = compute_basis(&mesh, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.basis");
        basis.save(&path).unwrap();
        let back = LaplaceBasis::load(&path, Some(&mesh.content_hash())).unwrap();
        assert_eq!(back, basis);
        let other = synthetic::bumpy_sphere(1, 0.2, 5);
        assert!(matches!(
            LaplaceBasis::load(&path, Some(&other.content_hash())),
            Err(Error::StaleCache { .. })
        ));
    }
}
