//! Finite-difference helpers shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use specmatch::network::MlpParams;

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Central differences of `f` at `x` along every coordinate.
pub fn numeric_grad(x: &DMatrix<f64>, h: f64, mut f: impl FnMut(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    let mut y = x.clone();
    for i in 0..x.len() {
        let orig = y[i];
        y[i] = orig + h;
        let fp = f(&y);
        y[i] = orig - h;
        let fm = f(&y);
        y[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
}

pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub fn params_numeric_grad(params: &MlpParams, h: f64, mut f: impl FnMut(&MlpParams) -> f64) -> Vec<f64> {
    let (d, l) = (params.dim(), params.num_layers());
    let mut flat = params.to_flat();
    (0..flat.len())
        .map(|i| {
            let orig = flat[i];
            flat[i] = orig + h;
            let fp = f(&MlpParams::from_flat(d, l, &flat).unwrap());
            flat[i] = orig - h;
            let fm = f(&MlpParams::from_flat(d, l, &flat).unwrap());
            flat[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
