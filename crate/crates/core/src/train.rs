//! Unsupervised training of the descriptor network.
//!
//! A step samples points on both shapes of each pair, pushes the sampled
//! descriptors through the network, projects them onto the restricted bases,
//! solves for both functional maps and evaluates the structural energies.
//! Gradients flow back through the map solve, the projection and the network.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::descriptors::sample_points;
use crate::error::{check_dim, Error, Result};
use crate::fmap::{solve_fmap, solve_fmap_backward, solve_fmap_regularized};
use crate::io;
use crate::network::{MlpParams, DEFAULT_LAYERS};
use crate::penalties::{mult_operator_grad, mult_operator_restricted, total_energy, PenaltyWeights};
use crate::spectral::{LaplaceBasis, RestrictedBasis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: PenaltyWeights,
    pub learning_rate: f64,
    pub batch_pairs: usize,
    pub iterations: usize,
    pub points_per_shape: usize,
    pub e4_descriptor_fraction: f64,
    pub k: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: PenaltyWeights::default(),
            learning_rate: 1e-3,
            batch_pairs: 10,
            iterations: 10_000,
            points_per_shape: 1500,
            e4_descriptor_fraction: 0.2,
            k: crate::spectral::DEFAULT_K,
            layers: DEFAULT_LAYERS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        PenaltyWeights::new(
            self.weights.bijectivity,
            self.weights.orthogonality,
            self.weights.laplacian,
            self.weights.descriptor,
        )?;
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.e4_descriptor_fraction > 0.0 && self.e4_descriptor_fraction <= 1.0) {
            return bad("e4_descriptor_fraction must lie in (0, 1]");
        }
        if self.batch_pairs == 0 {
            return bad("batch_pairs must be at least 1");
        }
        if self.points_per_shape == 0 || self.k == 0 || self.layers == 0 {
            return bad("points_per_shape, k and layers must be positive");
        }
        Ok(())
    }

    /// Stable hash of the configuration, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A shape as seen by the trainer: its basis and per-vertex descriptors.
#[derive(Debug, Clone)]
pub struct ShapeData {
    pub name: String,
    pub basis: LaplaceBasis,
    /// `n × d`
    pub descriptors: DMatrix<f64>,
}

impl ShapeData {
    pub fn new(name: impl Into<String>, basis: LaplaceBasis, descriptors: DMatrix<f64>) -> Result<Self> {
        check_dim("descriptor rows", basis.num_vertices(), descriptors.nrows())?;
        Ok(ShapeData {
            name: name.into(),
            basis,
            descriptors,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.basis.num_vertices()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let n = params.num_params();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Bias-corrected ADAM update. A non-finite gradient leaves parameters and
/// state untouched and returns `false`.
pub fn adam_step(params: &mut MlpParams, grads: &MlpParams, state: &mut AdamState, lr: f64) -> Result<bool> {
    let g = grads.to_flat();
    let mut p = params.to_flat();
    check_dim("gradient size", p.len(), g.len())?;
    check_dim("ADAM state size", p.len(), state.m.len())?;
    if g.iter().any(|v| !v.is_finite()) {
        log::warn!("non-finite gradient at ADAM step {}; update skipped", state.step + 1);
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..p.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    *params = MlpParams::from_flat(params.dim(), params.num_layers(), &p)?;
    Ok(true)
}

/// Random choices made for one pair in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub points1: Vec<usize>,
    pub points2: Vec<usize>,
    /// Descriptor columns whose multiplication operators enter E4.
    pub columns: Vec<usize>,
}

impl PairSample {
    /// Every vertex of both shapes and every descriptor column.
    pub fn full(s1: &ShapeData, s2: &ShapeData) -> Self {
        PairSample {
            points1: (0..s1.num_vertices()).collect(),
            points2: (0..s2.num_vertices()).collect(),
            columns: (0..s1.dim()).collect(),
        }
    }

    pub fn draw(s1: &ShapeData, s2: &ShapeData, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = s1.dim();
        let count = ((config.e4_descriptor_fraction * d as f64).ceil() as usize).clamp(1, d);
        let mut columns = rand::seq::index::sample(rng, d, count).into_vec();
        columns.sort_unstable();
        PairSample {
            points1: sample_points(s1.num_vertices(), config.points_per_shape, rng.gen()),
            points2: sample_points(s2.num_vertices(), config.points_per_shape, rng.gen()),
            columns,
        }
    }
}

/// Loss, energies, both maps and (optionally) the parameter gradient for a pair.
#[derive(Debug, Clone)]
pub struct PairEvaluation {
    pub loss: f64,
    pub components: [f64; 4],
    pub c12: DMatrix<f64>,
    pub c21: DMatrix<f64>,
    pub grads: Option<MlpParams>,
}

fn truncated_basis(shape: &ShapeData, k: usize) -> Result<LaplaceBasis> {
    if shape.basis.k() == k {
        Ok(shape.basis.clone())
    } else {
        shape.basis.truncated(k)
    }
}

/// Evaluates the energy of a pair for fixed random choices, using the first
/// `k` basis functions of each shape.
pub fn evaluate_pair(
    params: &MlpParams,
    s1: &ShapeData,
    s2: &ShapeData,
    sample: &PairSample,
    k: usize,
    weights: &PenaltyWeights,
    with_grad: bool,
) -> Result<PairEvaluation> {
    check_dim("descriptor dimension of shape pair", s1.dim(), s2.dim())?;
    let b1 = truncated_basis(s1, k.min(s1.basis.k()))?;
    let b2 = truncated_basis(s2, k.min(s2.basis.k()))?;
    let r1 = b1.restricted(&sample.points1)?;
    let r2 = b2.restricted(&sample.points2)?;
    evaluate_restricted(params, s1, s2, &r1, &r2, b1.eigenvalues(), b2.eigenvalues(), sample, weights, with_grad)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_restricted(
    params: &MlpParams,
    s1: &ShapeData,
    s2: &ShapeData,
    r1: &RestrictedBasis,
    r2: &RestrictedBasis,
    evals1: &[f64],
    evals2: &[f64],
    sample: &PairSample,
    weights: &PenaltyWeights,
    with_grad: bool,
) -> Result<PairEvaluation> {
    let x1 = select_rows(&s1.descriptors, &sample.points1);
    let x2 = select_rows(&s2.descriptors, &sample.points2);
    let (y1, cache1) = params.forward(&x1)?;
    let (y2, cache2) = params.forward(&x2)?;
    let a1 = &r1.pinv * &y1;
    let a2 = &r2.pinv * &y2;
    let c12 = solve_fmap(&a1, &a2)?;
    let c21 = solve_fmap(&a2, &a1)?;

    let mut ops1 = Vec::with_capacity(sample.columns.len());
    let mut ops2 = Vec::with_capacity(sample.columns.len());
    for &j in &sample.columns {
        if j >= y1.ncols() {
            return Err(Error::InvalidParameter(format!("descriptor column {j} out of range")));
        }
        ops1.push(mult_operator_restricted(&r1.rows, &r1.pinv, y1.column(j).as_slice())?);
        ops2.push(mult_operator_restricted(&r2.rows, &r2.pinv, y2.column(j).as_slice())?);
    }
    let energy = total_energy(&c12, &c21, evals1, evals2, &ops1, &ops2, weights)?;
    if !energy.value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite training energy (components {:?})",
            energy.components
        )));
    }

    let grads = if with_grad {
        let (g1a, g2a) = solve_fmap_backward(&a1, &a2, &c12, &energy.grad_c12)?;
        let (g2b, g1b) = solve_fmap_backward(&a2, &a1, &c21, &energy.grad_c21)?;
        let mut gy1 = r1.pinv.transpose() * (g1a + g1b);
        let mut gy2 = r2.pinv.transpose() * (g2a + g2b);
        for (idx, &j) in sample.columns.iter().enumerate() {
            let gf = mult_operator_grad(&r1.rows, &r1.pinv, &energy.grad_ops1[idx]);
            let gg = mult_operator_grad(&r2.rows, &r2.pinv, &energy.grad_ops2[idx]);
            for (dst, v) in gy1.column_mut(j).iter_mut().zip(gf) {
                *dst += v;
            }
            for (dst, v) in gy2.column_mut(j).iter_mut().zip(gg) {
                *dst += v;
            }
        }
        let (mut gp, _) = params.backward(&cache1, &gy1)?;
        let (gp2, _) = params.backward(&cache2, &gy2)?;
        gp.axpy(1.0, &gp2);
        Some(gp)
    } else {
        None
    };

    Ok(PairEvaluation {
        loss: energy.value,
        components: energy.components,
        c12,
        c21,
        grads,
    })
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Like [`evaluate_pair`] with freshly drawn samples; a singular restricted
/// Gram matrix triggers one redraw.
fn evaluate_random_pair(
    params: &MlpParams,
    s1: &ShapeData,
    s2: &ShapeData,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairEvaluation> {
    let mut attempt = 0;
    loop {
        let sample = PairSample::draw(s1, s2, config, rng);
        match evaluate_pair(params, s1, s2, &sample, config.k, &config.weights, true) {
            Err(Error::Numerical(msg)) if attempt == 0 && msg.contains("Gram") => {
                log::warn!("{} / {}: {msg}; resampling", s1.name, s2.name);
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub components: [f64; 4],
    pub wall_ms: f64,
    /// `false` when the update was skipped for a non-finite gradient.
    pub applied: bool,
}

/// Outcome of one optimization step over a batch of pairs.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub components: [f64; 4],
    pub applied: bool,
}

/// One ADAM step on the mean energy over `pairs`. Pair seeds are drawn from
/// `rng` before the parallel evaluation, so results do not depend on
/// scheduling.
pub fn training_step(
    shapes: &[ShapeData],
    pairs: &[(usize, usize)],
    params: &mut MlpParams,
    state: &mut AdamState,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("training step needs at least one pair".into()));
    }
    let seeds: Vec<u64> = pairs.iter().map(|_| rng.gen()).collect();
    let frozen = &*params;
    let evals: Vec<Result<PairEvaluation>> = pairs
        .par_iter()
        .zip(&seeds)
        .map(|(&(i, j), &seed)| {
            let mut pair_rng = ChaCha8Rng::seed_from_u64(seed);
            evaluate_random_pair(frozen, &shapes[i], &shapes[j], config, &mut pair_rng)
        })
        .collect();

    let scale = 1.0 / pairs.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    let mut components = [0.0; 4];
    for e in evals {
        let e = e?;
        loss += e.loss * scale;
        for (acc, v) in components.iter_mut().zip(e.components) {
            *acc += v * scale;
        }
        grad.axpy(scale, e.grads.as_ref().expect("gradient requested"));
    }
    let applied = adam_step(params, &grad, state, config.learning_rate)?;
    Ok(StepOutcome {
        loss,
        components,
        applied,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pairing {
    /// Every unordered pair of distinct shapes.
    AllPairs,
    Given(Vec<(usize, usize)>),
}

impl Pairing {
    pub fn resolve(&self, num_shapes: usize) -> Result<Vec<(usize, usize)>> {
        let pairs = match self {
            Pairing::AllPairs => (0..num_shapes)
                .flat_map(|i| (i + 1..num_shapes).map(move |j| (i, j)))
                .collect(),
            Pairing::Given(p) => p.clone(),
        };
        if pairs.is_empty() {
            return Err(Error::InvalidParameter("no training pairs".into()));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= num_shapes || j >= num_shapes) {
            return Err(Error::InvalidParameter(format!(
                "pair ({i}, {j}) refers to a shape outside 0..{num_shapes}"
            )));
        }
        Ok(pairs)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub history: Vec<StepRecord>,
}

/// Runs `config.iterations` steps from a fresh initialization.
pub fn train(shapes: &[ShapeData], pairing: &Pairing, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(shapes, pairing, config, None, |_, _, _| Ok(()))
}

/// Full training loop. `init` overrides the Glorot initialization; `observe`
/// sees every step after its update.
pub fn train_with<F>(
    shapes: &[ShapeData],
    pairing: &Pairing,
    config: &TrainConfig,
    init: Option<MlpParams>,
    mut observe: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &MlpParams, &StepRecord) -> Result<()>,
{
    config.validate()?;
    if shapes.len() < 2 {
        return Err(Error::InvalidParameter("training needs at least two shapes".into()));
    }
    let d = shapes[0].dim();
    for s in shapes {
        check_dim("descriptor dimension", d, s.dim())?;
    }
    let pairs = pairing.resolve(shapes.len())?;
    for s in shapes.iter().filter(|s| s.num_vertices() < config.points_per_shape) {
        log::warn!(
            "{}: {} vertices, fewer than points_per_shape = {}; every vertex is used",
            s.name,
            s.num_vertices(),
            config.points_per_shape
        );
    }
    let mut params = match init {
        Some(p) => {
            check_dim("initial network width", d, p.dim())?;
            p
        }
        None => MlpParams::init(d, config.layers, config.seed)?,
    };
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e);
    let mut history = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let start = Instant::now();
        let batch: Vec<(usize, usize)> = (0..config.batch_pairs)
            .map(|_| pairs[rng.gen_range(0..pairs.len())])
            .collect();
        let out = training_step(shapes, &batch, &mut params, &mut state, config, &mut rng)?;
        let record = StepRecord {
            step,
            loss: out.loss,
            components: out.components,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            applied: out.applied,
        };
        log::debug!("step {step}: loss {:.6e} {:?}", record.loss, record.components);
        observe(step, &params, &record)?;
        history.push(record);
    }
    Ok(TrainOutcome { params, history })
}

/// Training log as CSV: `step,loss,E1,E2,E3,E4,wall_ms`.
pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,E1,E2,E3,E4,wall_ms\n");
    for r in history {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:.3}\n",
            r.step, r.loss, r.components[0], r.components[1], r.components[2], r.components[3], r.wall_ms
        ));
    }
    out
}

pub fn write_history(path: &Path, history: &[StepRecord]) -> Result<()> {
    io::write_atomic(path, history_csv(history).as_bytes())
}

/// Mean of `values` over trailing windows: entry `i` averages
/// `values[i+1-w ..= i]`, clipped at the start.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Spectral coefficients (`k × d`) of a shape's transformed descriptors,
/// projected with the full basis.
pub fn transformed_coefficients(params: &MlpParams, shape: &ShapeData, k: usize) -> Result<DMatrix<f64>> {
    let basis = truncated_basis(shape, k.min(shape.basis.k()))?;
    let y = params.apply(&shape.descriptors)?;
    basis.project_columns(&y)
}

/// Regularized map from shape 1 to shape 2 computed on learned descriptors.
pub fn fmap_ours_opt(
    params: &MlpParams,
    s1: &ShapeData,
    s2: &ShapeData,
    k: usize,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let a1 = transformed_coefficients(params, s1, k)?;
    let a2 = transformed_coefficients(params, s2, k)?;
    let l1 = &s1.basis.eigenvalues()[..a1.nrows()];
    let l2 = &s2.basis.eigenvalues()[..a2.nrows()];
    solve_fmap_regularized(&a1, &a2, l1, l2, alpha)
}
