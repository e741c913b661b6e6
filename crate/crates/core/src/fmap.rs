//! Functional map estimation from spectral descriptor coefficients.
//!
//! Descriptor coefficients are `k × d` matrices: one row per basis function,
//! one column per descriptor function. A map `C` (`k2 × k1`) takes
//! coefficients on the first shape to coefficients on the second.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{check_dim, Error, Result};
use crate::io;

/// Ridge added to the Gram matrix, relative to its mean diagonal.
pub const RIDGE_REL: f64 = 1e-9;

/// A functional map together with the names of the shapes it maps between.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalMap {
    /// `k2 × k1`, maps coefficients on `source` to coefficients on `target`.
    pub matrix: DMatrix<f64>,
    pub source: String,
    pub target: String,
}

impl FunctionalMap {
    pub fn new(matrix: DMatrix<f64>, source: impl Into<String>, target: impl Into<String>) -> Self {
        FunctionalMap {
            matrix,
            source: source.into(),
            target: target.into(),
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        io::write_matrix_csv(path, &self.matrix)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let matrix = io::read_matrix_csv(path)?;
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("{}: non-finite map entry", path.display())));
        }
        Ok(FunctionalMap::new(matrix, "", ""))
    }
}

/// Normal-equation factorization shared by the forward and backward solves.
struct Normal {
    chol: Cholesky<f64, Dyn>,
    ridge: f64,
}

fn factor_gram(a1: &DMatrix<f64>) -> Result<Normal> {
    let k1 = a1.nrows();
    let mut gram = a1 * a1.transpose();
    let ridge = RIDGE_REL * gram.trace() / k1 as f64;
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::Numerical(
            "descriptor coefficients are zero or non-finite; map is undetermined".into(),
        ));
    }
    for i in 0..k1 {
        gram[(i, i)] += ridge;
    }
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::Numerical("descriptor Gram matrix is not positive definite".into()))?;
    Ok(Normal { chol, ridge })
}

fn check_pair(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> Result<()> {
    check_dim("descriptor count of A1 vs A2", a1.ncols(), a2.ncols())?;
    if a1.ncols() == 0 || a1.nrows() == 0 || a2.nrows() == 0 {
        return Err(Error::InvalidParameter("empty descriptor coefficient matrix".into()));
    }
    if a1.iter().chain(a2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite descriptor coefficients".into()));
    }
    if a1.ncols() < a1.nrows() {
        log::debug!(
            "underdetermined map estimate: {} descriptors for {} basis functions",
            a1.ncols(),
            a1.nrows()
        );
    }
    Ok(())
}

/// Least-squares map `argmin_C ‖C A1 − A2‖²`, computed as
/// `C = A2 A1ᵀ (A1 A1ᵀ + εI)⁻¹` with `ε = 1e−9 · tr(A1 A1ᵀ)/k1`.
pub fn solve_fmap(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_pair(a1, a2)?;
    let normal = factor_gram(a1)?;
    // Cᵀ = G⁻¹ A1 A2ᵀ
    let rhs = a1 * a2.transpose();
    Ok(normal.chol.solve(&rhs).transpose())
}

/// Gradients of a scalar `E` with respect to `A1` and `A2` given `∂E/∂C`,
/// where `C = solve_fmap(A1, A2)`. Includes the dependence of the ridge on A1.
pub fn solve_fmap_backward(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    c: &DMatrix<f64>,
    grad_c: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_pair(a1, a2)?;
    let (k1, k2) = (a1.nrows(), a2.nrows());
    check_dim("C rows", k2, c.nrows())?;
    check_dim("C cols", k1, c.ncols())?;
    check_dim("grad_C rows", k2, grad_c.nrows())?;
    check_dim("grad_C cols", k1, grad_c.ncols())?;

    let normal = factor_gram(a1)?;
    // C = B X with B = A2 A1ᵀ and X = G⁻¹ (symmetric)
    // grad_B = grad_C X,  grad_G = −X Bᵀ grad_C X = −Cᵀ grad_C X
    let grad_b = normal.chol.solve(&grad_c.transpose()).transpose(); // k2 × k1
    let grad_g = -(c.transpose() * &grad_b); // k1 × k1
    let sym = &grad_g + grad_g.transpose();

    let grad_a2 = &grad_b * a1;
    let ridge_scale = 2.0 * RIDGE_REL * grad_g.trace() / k1 as f64;
    let grad_a1 = grad_b.transpose() * a2 + &sym * a1 + a1 * ridge_scale;
    debug_assert!(normal.ridge > 0.0);
    Ok((grad_a1, grad_a2))
}

/// Map minimizing `‖C A1 − A2‖² + α ‖C Λ1 − Λ2 C‖²`. The commutativity term
/// is diagonal per row of `C`, so each row is an independent `k1 × k1` solve:
/// `(A1A1ᵀ + α diag((λ1_j − λ2_i)²) + εI) c_i = A1 a2_iᵀ`.
pub fn solve_fmap_regularized(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    evals1: &[f64],
    evals2: &[f64],
    alpha: f64,
) -> Result<DMatrix<f64>> {
    check_pair(a1, a2)?;
    let (k1, k2) = (a1.nrows(), a2.nrows());
    check_dim("eigenvalues of shape 1", k1, evals1.len())?;
    check_dim("eigenvalues of shape 2", k2, evals2.len())?;
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("regularization weight {alpha} must be ≥ 0")));
    }
    let gram = a1 * a1.transpose();
    let ridge = RIDGE_REL * gram.trace() / k1 as f64;
    if !(ridge > 0.0) {
        return Err(Error::Numerical("descriptor coefficients are zero".into()));
    }
    let rhs = a1 * a2.transpose(); // k1 × k2, column i is A1 a2_iᵀ
    let mut c = DMatrix::zeros(k2, k1);
    for i in 0..k2 {
        let mut system = gram.clone();
        for j in 0..k1 {
            let d = evals1[j] - evals2[i];
            system[(j, j)] += alpha * d * d + ridge;
        }
        let chol = Cholesky::new(system)
            .ok_or_else(|| Error::Numerical(format!("row {i} system is not positive definite")))?;
        let row = chol.solve(&rhs.column(i).into_owned());
        c.row_mut(i).copy_from(&row.transpose());
    }
    Ok(c)
}

/// `‖C A1 − A2‖² + α ‖C Λ1 − Λ2 C‖²`.
pub fn regularized_objective(
    c: &DMatrix<f64>,
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    evals1: &[f64],
    evals2: &[f64],
    alpha: f64,
) -> f64 {
    let desc = (c * a1 - a2).norm_squared();
    let mut comm = 0.0;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            let d = evals1[j] - evals2[i];
            comm += (c[(i, j)] * d).powi(2);
        }
    }
    desc + alpha * comm
}
