//! Structural energies on a pair of functional maps and their gradients.
//!
//! `c12` is `k2 × k1` (shape 1 to shape 2), `c21` is `k1 × k2`. All energies use
//! squared Frobenius norms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::spectral::LaplaceBasis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub bijectivity: f64,
    pub orthogonality: f64,
    pub laplacian: f64,
    pub descriptor: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            bijectivity: 1e3,
            orthogonality: 1e3,
            laplacian: 1.0,
            descriptor: 1e5,
        }
    }
}

impl PenaltyWeights {
    pub fn new(w1: f64, w2: f64, w3: f64, w4: f64) -> Result<Self> {
        let w = PenaltyWeights {
            bijectivity: w1,
            orthogonality: w2,
            laplacian: w3,
            descriptor: w4,
        };
        if w.as_array().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "penalty weights must be finite and nonnegative, got {:?}",
                w.as_array()
            )));
        }
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.bijectivity, self.orthogonality, self.laplacian, self.descriptor]
    }
}

/// Value of one penalty and its gradients with respect to both maps.
#[derive(Debug, Clone)]
pub struct MapPenalty {
    pub value: f64,
    pub grad_c12: DMatrix<f64>,
    pub grad_c21: DMatrix<f64>,
}

fn check_maps(c12: &DMatrix<f64>, c21: &DMatrix<f64>) -> Result<()> {
    check_dim("C21 rows vs C12 cols", c12.ncols(), c21.nrows())?;
    check_dim("C21 cols vs C12 rows", c12.nrows(), c21.ncols())
}

/// `‖C12 C21 − I‖² + ‖C21 C12 − I‖²`
pub fn e1_bijectivity(c12: &DMatrix<f64>, c21: &DMatrix<f64>) -> Result<MapPenalty> {
    check_maps(c12, c21)?;
    let (k2, k1) = c12.shape();
    let r2 = c12 * c21 - DMatrix::identity(k2, k2);
    let r1 = c21 * c12 - DMatrix::identity(k1, k1);
    Ok(MapPenalty {
        value: r2.norm_squared() + r1.norm_squared(),
        grad_c12: (&r2 * c21.transpose() + c21.transpose() * &r1) * 2.0,
        grad_c21: (c12.transpose() * &r2 + &r1 * c12.transpose()) * 2.0,
    })
}

/// `‖C12ᵀ C12 − I‖² + ‖C21ᵀ C21 − I‖²`
pub fn e2_orthogonality(c12: &DMatrix<f64>, c21: &DMatrix<f64>) -> Result<MapPenalty> {
    check_maps(c12, c21)?;
    let term = |c: &DMatrix<f64>| {
        let k = c.ncols();
        let r = c.transpose() * c - DMatrix::identity(k, k);
        (r.norm_squared(), c * r * 4.0)
    };
    let (v12, g12) = term(c12);
    let (v21, g21) = term(c21);
    Ok(MapPenalty {
        value: v12 + v21,
        grad_c12: g12,
        grad_c21: g21,
    })
}

/// `‖C12 Λ1 − Λ2 C12‖² + ‖C21 Λ2 − Λ1 C21‖²`, evaluated elementwise.
pub fn e3_laplacian_commutativity(
    c12: &DMatrix<f64>,
    c21: &DMatrix<f64>,
    evals1: &[f64],
    evals2: &[f64],
) -> Result<MapPenalty> {
    check_maps(c12, c21)?;
    check_dim("Λ1 length", c12.ncols(), evals1.len())?;
    check_dim("Λ2 length", c12.nrows(), evals2.len())?;
    // C(i, j) weighted by (λ_in(j) − λ_out(i))²
    let term = |c: &DMatrix<f64>, lin: &[f64], lout: &[f64]| {
        let mut value = 0.0;
        let grad = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| {
            let d2 = (lin[j] - lout[i]).powi(2);
            value += c[(i, j)] * c[(i, j)] * d2;
            2.0 * c[(i, j)] * d2
        });
        (value, grad)
    };
    let (v12, g12) = term(c12, evals1, evals2);
    let (v21, g21) = term(c21, evals2, evals1);
    Ok(MapPenalty {
        value: v12 + v21,
        grad_c12: g12,
        grad_c21: g21,
    })
}

/// Same value as [`e3_laplacian_commutativity`], via explicit matrix products.
pub fn e3_matrix_form(c12: &DMatrix<f64>, c21: &DMatrix<f64>, evals1: &[f64], evals2: &[f64]) -> f64 {
    let l1 = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(evals1));
    let l2 = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(evals2));
    (c12 * &l1 - &l2 * c12).norm_squared() + (c21 * &l2 - &l1 * c21).norm_squared()
}

/// Reduced-basis operator of pointwise multiplication by a function,
/// `Φ⁺ Diag(f) Φ` (`k × k`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultOperator(pub DMatrix<f64>);

impl MultOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `Φᵀ M Diag(f) Φ` on the full basis.
pub fn mult_operator(basis: &LaplaceBasis, f: &[f64]) -> Result<MultOperator> {
    check_dim("mult_operator", basis.num_vertices(), f.len())?;
    let phi = basis.eigenfunctions();
    let mut weighted = phi.clone();
    for (r, (m, fv)) in basis.mass().iter().zip(f).enumerate() {
        weighted.row_mut(r).scale_mut(m * fv);
    }
    let op = phi.transpose() * weighted;
    let asym = (&op - op.transpose()).amax();
    debug_assert!(asym <= 1e-8 * op.amax().max(1.0), "multiplication operator asymmetry {asym}");
    Ok(MultOperator(op))
}

/// `P Diag(f) Φ_s` for basis rows `Φ_s` (`s × k`) and a left inverse `P`
/// (`k × s`), contracted row by row without forming `Diag(f)`.
pub fn mult_operator_restricted(rows: &DMatrix<f64>, pinv: &DMatrix<f64>, f: &[f64]) -> Result<MultOperator> {
    check_dim("mult_operator_restricted", rows.nrows(), f.len())?;
    check_dim("pinv columns", rows.nrows(), pinv.ncols())?;
    let mut scaled = rows.clone();
    for (r, fv) in f.iter().enumerate() {
        scaled.row_mut(r).scale_mut(*fv);
    }
    Ok(MultOperator(pinv * scaled))
}

/// Gradient of a scalar with respect to `f` given its gradient with respect
/// to `P Diag(f) Φ_s`: `∂/∂f_v = (Pᵀ G)_v · (Φ_s)_v`.
pub fn mult_operator_grad(rows: &DMatrix<f64>, pinv: &DMatrix<f64>, grad_op: &DMatrix<f64>) -> Vec<f64> {
    let pg = pinv.transpose() * grad_op; // s × k
    (0..rows.nrows())
        .map(|v| pg.row(v).dot(&rows.row(v)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct DescriptorPenalty {
    pub value: f64,
    pub grad_c12: DMatrix<f64>,
    pub grad_c21: DMatrix<f64>,
    pub grad_ops1: Vec<DMatrix<f64>>,
    pub grad_ops2: Vec<DMatrix<f64>>,
}

/// `Σ_i ‖C12 Mf_i − Mg_i C12‖² + ‖C21 Mg_i − Mf_i C21‖²`
pub fn e4_descriptor_commutativity(
    c12: &DMatrix<f64>,
    c21: &DMatrix<f64>,
    ops1: &[MultOperator],
    ops2: &[MultOperator],
) -> Result<DescriptorPenalty> {
    check_maps(c12, c21)?;
    check_dim("descriptor operator pairs", ops1.len(), ops2.len())?;
    let (k2, k1) = c12.shape();
    let mut out = DescriptorPenalty {
        value: 0.0,
        grad_c12: DMatrix::zeros(k2, k1),
        grad_c21: DMatrix::zeros(k1, k2),
        grad_ops1: Vec::with_capacity(ops1.len()),
        grad_ops2: Vec::with_capacity(ops2.len()),
    };
    for (mf, mg) in ops1.iter().zip(ops2) {
        let (mf, mg) = (&mf.0, &mg.0);
        check_dim("Mf size", k1, mf.nrows())?;
        check_dim("Mg size", k2, mg.nrows())?;
        let r12 = c12 * mf - mg * c12;
        let r21 = c21 * mg - mf * c21;
        out.value += r12.norm_squared() + r21.norm_squared();
        out.grad_c12 += (&r12 * mf.transpose() - mg.transpose() * &r12) * 2.0;
        out.grad_c21 += (&r21 * mg.transpose() - mf.transpose() * &r21) * 2.0;
        out.grad_ops1
            .push((c12.transpose() * &r12 - &r21 * c21.transpose()) * 2.0);
        out.grad_ops2
            .push((c21.transpose() * &r21 - &r12 * c12.transpose()) * 2.0);
    }
    Ok(out)
}

/// Individual energies, their weighted sum and the weighted gradients.
#[derive(Debug, Clone)]
pub struct TotalEnergy {
    /// Unweighted `[E1, E2, E3, E4]`.
    pub components: [f64; 4],
    pub value: f64,
    pub grad_c12: DMatrix<f64>,
    pub grad_c21: DMatrix<f64>,
    pub grad_ops1: Vec<DMatrix<f64>>,
    pub grad_ops2: Vec<DMatrix<f64>>,
}

pub fn total_energy(
    c12: &DMatrix<f64>,
    c21: &DMatrix<f64>,
    evals1: &[f64],
    evals2: &[f64],
    ops1: &[MultOperator],
    ops2: &[MultOperator],
    weights: &PenaltyWeights,
) -> Result<TotalEnergy> {
    let e1 = e1_bijectivity(c12, c21)?;
    let e2 = e2_orthogonality(c12, c21)?;
    let e3 = e3_laplacian_commutativity(c12, c21, evals1, evals2)?;
    let e4 = e4_descriptor_commutativity(c12, c21, ops1, ops2)?;
    let [w1, w2, w3, w4] = weights.as_array();
    let components = [e1.value, e2.value, e3.value, e4.value];
    Ok(TotalEnergy {
        components,
        value: w1 * e1.value + w2 * e2.value + w3 * e3.value + w4 * e4.value,
        grad_c12: e1.grad_c12 * w1 + e2.grad_c12 * w2 + e3.grad_c12 * w3 + e4.grad_c12 * w4,
        grad_c21: e1.grad_c21 * w1 + e2.grad_c21 * w2 + e3.grad_c21 * w3 + e4.grad_c21 * w4,
        grad_ops1: e4.grad_ops1.into_iter().map(|g| g * w4).collect(),
        grad_ops2: e4.grad_ops2.into_iter().map(|g| g * w4).collect(),
    })
}
