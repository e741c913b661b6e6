//! Residual descriptor network applied independently to every point.
//!
//! Each layer maps a row `x` to `x + ELU(W x + b)`; width never changes. Rows
//! are points, so a whole shape's descriptor matrix goes through at once.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io;

pub const DEFAULT_LAYERS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d × d`, applied as `W x`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

fn elu(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

fn elu_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// Intermediate values of a forward pass, consumed by [`MlpParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`rows × d`).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations `X Wᵀ + b` of each layer.
    preacts: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    version: u32,
    dim: usize,
    layers: usize,
    config_hash: String,
}

impl MlpParams {
    /// Glorot-uniform weights in `±√(6/(2d))`, zero biases.
    pub fn init(dim: usize, layers: usize, seed: u64) -> Result<Self> {
        if dim == 0 || layers == 0 {
            return Err(Error::InvalidParameter("network needs d ≥ 1 and at least one layer".into()));
        }
        let bound = (6.0 / (2.0 * dim as f64)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..layers)
            .map(|_| Layer {
                weight: DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-bound..bound)),
                bias: DVector::zeros(dim),
            })
            .collect();
        Ok(MlpParams { layers })
    }

    /// All-zero parameters: the network is the identity map.
    pub fn zeros(dim: usize, layers: usize) -> Self {
        MlpParams {
            layers: (0..layers)
                .map(|_| Layer {
                    weight: DMatrix::zeros(dim, dim),
                    bias: DVector::zeros(dim),
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.bias.len())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        let d = self.dim();
        self.layers.len() * (d * d + d)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        MlpParams::zeros(self.dim(), self.num_layers())
    }

    /// Flat view in layer order: weights row-major, then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            for r in 0..l.weight.nrows() {
                out.extend(l.weight.row(r).iter());
            }
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn from_flat(dim: usize, layers: usize, flat: &[f64]) -> Result<Self> {
        check_dim("flat parameter count", layers * (dim * dim + dim), flat.len())?;
        let mut it = flat.chunks_exact(dim * dim + dim);
        let layers = (0..layers)
            .map(|_| {
                let chunk = it.next().expect("length checked");
                Layer {
                    weight: DMatrix::from_row_slice(dim, dim, &chunk[..dim * dim]),
                    bias: DVector::from_column_slice(&chunk[dim * dim..]),
                }
            })
            .collect();
        Ok(MlpParams { layers })
    }

    /// Adds `scale · other` in place.
    pub fn axpy(&mut self, scale: f64, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight * scale;
            a.bias.axpy(scale, &b.bias, 1.0);
        }
    }

    /// Runs every row of `input` (`rows × d`) through the network.
    pub fn forward(&self, input: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        check_dim("network input width", self.dim(), input.ncols())?;
        let mut x = input.clone();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let mut z = &x * layer.weight.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let next = &x + z.map(elu);
            cache.inputs.push(x);
            cache.preacts.push(z);
            x = next;
        }
        Ok((x, cache))
    }

    /// Forward pass without keeping intermediates.
    pub fn apply(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("network input width", self.dim(), input.ncols())?;
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = &x * layer.weight.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.bias.transpose();
            }
            z.apply(|v| *v = elu(*v));
            x += z;
        }
        Ok(x)
    }

    /// Gradients of a scalar loss with respect to the parameters and the
    /// input, given its gradient with respect to the output.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &DMatrix<f64>,
    ) -> Result<(MlpParams, DMatrix<f64>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidParameter(format!(
                "stale forward cache: {} layers cached, network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        let rows = cache.inputs.first().map_or(0, |x| x.nrows());
        if grad_output.nrows() != rows || grad_output.ncols() != self.dim() {
            return Err(Error::InvalidParameter(format!(
                "stale forward cache: cached {rows}×{}, gradient is {}×{}",
                self.dim(),
                grad_output.nrows(),
                grad_output.ncols()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.clone();
        for ((layer, x), z) in self.layers.iter().zip(&cache.inputs).zip(&cache.preacts).rev() {
            let gz = g.zip_map(z, |gv, zv| gv * elu_grad(zv));
            let weight = gz.transpose() * x;
            let bias = DVector::from_iterator(gz.ncols(), gz.column_iter().map(|c| c.sum()));
            g += &gz * &layer.weight;
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        Ok((MlpParams { layers: grads }, g))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let header = CheckpointHeader {
            kind: "descriptor_mlp".into(),
            version: 1,
            dim: self.dim(),
            layers: self.num_layers(),
            config_hash: config_hash.into(),
        };
        io::write_container(path, &header, &self.to_flat())
    }

    /// Returns the parameters and the config hash they were trained with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (header, payload): (CheckpointHeader, Vec<f64>) = io::read_container(path)?;
        if header.kind != "descriptor_mlp" || header.version != 1 {
            return Err(Error::InvalidData(format!(
                "{}: not a version-1 network checkpoint",
                path.display()
            )));
        }
        let params = MlpParams::from_flat(header.dim, header.layers, &payload)?;
        if !params.is_finite() {
            return Err(Error::InvalidData(format!("{}: non-finite parameters", path.display())));
        }
        Ok((params, header.config_hash))
    }
}
