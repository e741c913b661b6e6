//! Smallest eigenpairs of the symmetric pencil `W x = λ M x` with `M` diagonal
//! positive.
//!
//! Large problems use shift-invert block Krylov iteration: with `D = M^{1/2}`
//! the operator `D (W − σM)⁻¹ D` is symmetric in the Euclidean inner product and
//! its largest eigenvalues `θ = 1/(λ − σ)` correspond to the smallest `λ`. The
//! Krylov basis is fully reorthogonalized, so repeated eigenvalues (common on
//! symmetric meshes) are resolved by the block. Small problems go through a
//! dense symmetric eigendecomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprs::{CsMat, FillInReduction, SymmetryCheck};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EigenOptions {
    /// Shift σ for the shift-invert operator. `None` picks
    /// `−1e−3 · 4π / total_mass`, i.e. a small fraction of the first nonzero
    /// eigenvalue of a sphere with the same area.
    pub shift: Option<f64>,
    pub tolerance: f64,
    pub max_restarts: usize,
    pub block_size: usize,
    /// Problems with at most this many unknowns are solved densely.
    pub dense_limit: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            shift: None,
            tolerance: 1e-10,
            max_restarts: 300,
            block_size: 12,
            dense_limit: 600,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Ascending.
    pub values: Vec<f64>,
    /// `n × k`, columns M-orthonormal.
    pub vectors: DMatrix<f64>,
    pub iterations: usize,
}

pub fn smallest_eigenpairs(
    stiffness: &CsMat<f64>,
    mass: &[f64],
    k: usize,
    opts: &EigenOptions,
) -> Result<EigenResult> {
    let n = mass.len();
    if stiffness.rows() != n || stiffness.cols() != n {
        return Err(Error::DimensionMismatch {
            context: "stiffness vs mass",
            expected: n,
            actual: stiffness.rows(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "requested {k} eigenpairs of a {n}-dimensional problem"
        )));
    }
    if mass.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Numerical("mass matrix is not positive".into()));
    }
    if n <= opts.dense_limit || 3 * k >= n {
        dense_smallest(stiffness, mass, k)
    } else {
        krylov_smallest(stiffness, mass, k, opts)
    }
}

/// Dense route: eigendecomposition of `D⁻¹ W D⁻¹`. Also used directly when a
/// complete basis is wanted.
pub fn dense_smallest(stiffness: &CsMat<f64>, mass: &[f64], k: usize) -> Result<EigenResult> {
    let n = mass.len();
    let inv_sqrt: Vec<f64> = mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut a = DMatrix::zeros(n, n);
    for (v, (r, c)) in stiffness.iter() {
        a[(r, c)] += v * inv_sqrt[r] * inv_sqrt[c];
    }
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, 0)
        .ok_or_else(|| Error::EigenNonConvergence("dense symmetric eigensolver failed".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, k, |r, c| eig.eigenvectors[(r, order[c])] * inv_sqrt[r]);
    Ok(EigenResult {
        values,
        vectors,
        iterations: 1,
    })
}

struct ShiftInvert {
    factor: LdlNumeric<f64, usize>,
    sqrt_mass: Vec<f64>,
}

impl ShiftInvert {
    fn new(stiffness: &CsMat<f64>, mass: &[f64], shift: f64) -> Result<Self> {
        let n = mass.len();
        let shifted_diag: CsMat<f64> = CsMat::new_csc(
            (n, n),
            (0..=n).collect(),
            (0..n).collect(),
            mass.iter().map(|m| -shift * m).collect(),
        );
        let stiffness_csc = stiffness.to_csc();
        let shifted = &stiffness_csc + &shifted_diag;
        let factor = Ldl::new()
            .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
            .check_symmetry(SymmetryCheck::DontCheckSymmetry)
            .numeric(shifted.view())
            .map_err(|e| Error::Numerical(format!("factorization of shifted operator failed: {e}")))?;
        Ok(ShiftInvert {
            factor,
            sqrt_mass: mass.iter().map(|m| m.sqrt()).collect(),
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let rhs: Vec<f64> = x.iter().zip(&self.sqrt_mass).map(|(a, d)| a * d).collect();
        let mut y: Vec<f64> = self.factor.solve(&rhs);
        for (v, d) in y.iter_mut().zip(&self.sqrt_mass) {
            *v *= d;
        }
        y
    }
}

/// Orthonormalizes the columns of `block` against the first `m` columns of
/// `basis` and against each other. Columns that vanish are replaced by random
/// directions so the block keeps its width.
fn orthonormalize_block(
    basis: &DMatrix<f64>,
    m: usize,
    block: &mut DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) {
    let n = block.nrows();
    for c in 0..block.ncols() {
        let mut attempts = 0;
        loop {
            let original = block.column(c).norm();
            for _pass in 0..2 {
                if m > 0 {
                    let q = basis.columns(0, m);
                    let coeffs = q.tr_mul(&block.column(c));
                    let corr = &q * coeffs;
                    block.column_mut(c).axpy(-1.0, &corr, 1.0);
                }
                for j in 0..c {
                    let dot = block.column(j).dot(&block.column(c));
                    let prev = block.column(j).clone_owned();
                    block.column_mut(c).axpy(-dot, &prev, 1.0);
                }
            }
            let norm = block.column(c).norm();
            if norm > 1e-10 * original.max(f64::MIN_POSITIVE) && norm > 0.0 {
                block.column_mut(c).scale_mut(1.0 / norm);
                break;
            }
            attempts += 1;
            assert!(attempts < 50, "cannot extend an orthonormal basis of dimension {n}");
            for r in 0..n {
                block[(r, c)] = rng.gen_range(-1.0..1.0);
            }
        }
    }
}

fn krylov_smallest(
    stiffness: &CsMat<f64>,
    mass: &[f64],
    k: usize,
    opts: &EigenOptions,
) -> Result<EigenResult> {
    let n = mass.len();
    let total: f64 = mass.iter().sum();
    let shift = opts
        .shift
        .unwrap_or(-1e-3 * 4.0 * std::f64::consts::PI / total);
    let op = ShiftInvert::new(stiffness, mass, shift)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let b = opts.block_size.max(1).min(n);
    let wanted = (k + b).min(n);
    let m_max = (4 * k + 8 * b).max(k + 200).min(n);

    let mut basis = DMatrix::<f64>::zeros(n, m_max);
    let mut images = DMatrix::<f64>::zeros(n, m_max);

    let mut start = DMatrix::from_fn(n, b, |_, _| rng.gen_range(-1.0..1.0));
    let mut last_residual = f64::INFINITY;
    let mut total_blocks = 0usize;

    for restart in 0..=opts.max_restarts {
        let mut m = 0usize;
        orthonormalize_block(&basis, 0, &mut start, &mut rng);
        let mut block = start.clone();
        let mut next_check = wanted.max(2 * k).min(m_max);
        loop {
            let width = block.ncols().min(m_max - m);
            for c in 0..width {
                let col = block.column(c);
                basis.column_mut(m + c).copy_from(&col);
                let img = op.apply(col.as_slice());
                images.column_mut(m + c).copy_from_slice(&img);
            }
            m += width;
            total_blocks += 1;

            if m >= next_check || m == m_max {
                let (converged, ritz) = rayleigh_ritz(&basis, &images, m, k, opts.tolerance);
                last_residual = ritz.worst_residual;
                if converged {
                    return finish(stiffness, mass, &basis, &ritz, m, k, shift, total_blocks);
                }
                if m == m_max {
                    log::debug!(
                        "eigensolver restart {restart}: worst relative residual {:.3e}",
                        ritz.worst_residual
                    );
                    start = ritz.vectors(&basis, m, wanted);
                    break;
                }
                next_check = (m + 2 * b).min(m_max);
            }

            let mut next = images.columns(m - width, width).clone_owned();
            orthonormalize_block(&basis, m, &mut next, &mut rng);
            block = next;
        }
    }
    Err(Error::EigenNonConvergence(format!(
        "{} restarts, {total_blocks} block steps, worst relative Ritz residual {last_residual:.3e} > {:.1e}",
        opts.max_restarts, opts.tolerance
    )))
}

struct Ritz {
    /// Top Ritz values (descending θ) and coefficient vectors in the basis.
    thetas: Vec<f64>,
    coeffs: DMatrix<f64>,
    worst_residual: f64,
}

impl Ritz {
    fn vectors(&self, basis: &DMatrix<f64>, m: usize, count: usize) -> DMatrix<f64> {
        let count = count.min(self.coeffs.ncols());
        basis.columns(0, m) * self.coeffs.columns(0, count)
    }
}

fn rayleigh_ritz(
    basis: &DMatrix<f64>,
    images: &DMatrix<f64>,
    m: usize,
    k: usize,
    tol: f64,
) -> (bool, Ritz) {
    let q = basis.columns(0, m);
    let z = images.columns(0, m);
    let h = q.transpose() * &z;
    let h = (&h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let keep = order.len().min(m);
    let thetas: Vec<f64> = order[..keep].iter().map(|&i| eig.eigenvalues[i]).collect();
    let coeffs = DMatrix::from_fn(m, keep, |r, c| eig.eigenvectors[(r, order[c])]);

    let top = coeffs.columns(0, k.min(keep));
    let qs = &q * &top;
    let zs = &z * &top;
    let mut worst: f64 = 0.0;
    for c in 0..top.ncols() {
        let r = zs.column(c) - qs.column(c) * thetas[c];
        worst = worst.max(r.norm() / thetas[c].abs().max(f64::MIN_POSITIVE));
    }
    (
        worst <= tol,
        Ritz {
            thetas,
            coeffs,
            worst_residual: worst,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    stiffness: &CsMat<f64>,
    mass: &[f64],
    basis: &DMatrix<f64>,
    ritz: &Ritz,
    m: usize,
    k: usize,
    shift: f64,
    iterations: usize,
) -> Result<EigenResult> {
    let n = mass.len();
    let y = ritz.vectors(basis, m, k);
    let mut vectors = DMatrix::zeros(n, k);
    let mut values = Vec::with_capacity(k);
    for c in 0..k {
        let mut phi = DVector::from_fn(n, |r, _| y[(r, c)] / mass[r].sqrt());
        let mnorm = phi
            .iter()
            .zip(mass)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
            .sqrt();
        phi /= mnorm;
        // Rayleigh quotient is more accurate than 1/θ + σ for the near-zero mode
        let w_phi = spmv(stiffness, phi.as_slice());
        let rq: f64 = phi.iter().zip(&w_phi).map(|(a, b)| a * b).sum();
        let from_theta = 1.0 / ritz.thetas[c] + shift;
        values.push(if rq.is_finite() { rq } else { from_theta });
        vectors.column_mut(c).copy_from(&phi);
    }
    // Ritz values come out descending in θ, i.e. ascending in λ, but the
    // Rayleigh refinement can swap near-equal neighbours.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let values = order.iter().map(|&i| values[i]).collect();
    let vectors = DMatrix::from_fn(n, k, |r, c| vectors[(r, order[c])]);
    Ok(EigenResult {
        values,
        vectors,
        iterations,
    })
}

/// Sparse matrix times dense vector (either storage order).
pub fn spmv(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.rows()];
    for (v, (r, c)) in a.iter() {
        y[r] += v * x[c];
    }
    y
}
