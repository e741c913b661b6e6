//! End-to-end commands behind the `specmatch` binary: cached precomputation,
//! training, matching, refinement and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::descriptors::{compute_hks, compute_shot, load_descriptors, ShotParams};
use crate::error::{Error, Result};
use crate::eval::{geodesic_error, ErrorReport};
use crate::fmap::solve_fmap_regularized;
use crate::io;
use crate::mesh::{load_mesh, TriangleMesh};
use crate::network::MlpParams;
use crate::pointmap::{fmap_to_p2p, icp_refine, PointMap, DEFAULT_ICP_ITERS};
use crate::spectral::{compute_basis, LaplaceBasis, DEFAULT_K};
use crate::train::{fmap_ours_opt, train_with, write_history, Pairing, ShapeData, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DescriptorSettings {
    /// SHOT with the given support radius as a fraction of the bounding-box
    /// diagonal and bin counts (azimuth, elevation, radial, histogram).
    Shot {
        radius_fraction: f64,
        bins: [usize; 4],
    },
    Hks {
        times: usize,
    },
    /// Descriptors read from `<dir>/<mesh stem>.csv`.
    External {
        dir: PathBuf,
    },
}

impl Default for DescriptorSettings {
    fn default() -> Self {
        DescriptorSettings::Shot {
            radius_fraction: 0.05,
            bins: [8, 2, 2, 11],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub shapes: Vec<PathBuf>,
    pub k: usize,
    pub descriptors: DescriptorSettings,
    pub train: TrainConfig,
    /// Training pairs as shape indices; empty means all pairs.
    pub pairs: Vec<(usize, usize)>,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            shapes: Vec::new(),
            k: DEFAULT_K,
            descriptors: DescriptorSettings::default(),
            train: TrainConfig::default(),
            pairs: Vec::new(),
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::InvalidParameter(format!("{}: {e}", path.display()))
        })
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.out.join("cache")
    }

    fn descriptor_hash(&self) -> String {
        let json = serde_json::to_string(&self.descriptors).expect("settings serialize");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

pub fn shape_stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("shape")
        .to_string()
}

#[derive(Serialize, Deserialize)]
struct DescriptorHeader {
    kind: String,
    mesh_hash: String,
    settings_hash: String,
    n: usize,
    d: usize,
}

/// Cache file locations for one shape.
#[derive(Debug, Clone)]
pub struct CachePaths {
    pub basis: PathBuf,
    pub descriptors: PathBuf,
}

pub fn cache_paths(config: &PipelineConfig, shape: &Path) -> CachePaths {
    let stem = shape_stem(shape);
    let dir = config.cache_dir();
    CachePaths {
        basis: dir.join(format!("{stem}.basis.bin")),
        descriptors: dir.join(format!("{stem}.desc.bin")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Computed,
    Cached,
}

#[derive(Debug, Clone)]
pub struct PrecomputeReport {
    pub shape: PathBuf,
    pub status: CacheStatus,
    pub basis_seconds: f64,
    pub descriptor_seconds: f64,
}

pub fn compute_descriptors(
    mesh: &TriangleMesh,
    basis: &LaplaceBasis,
    settings: &DescriptorSettings,
    mesh_path: &Path,
) -> Result<DMatrix<f64>> {
    let field = match settings {
        DescriptorSettings::Shot { radius_fraction, bins } => {
            let params = ShotParams {
                radius: radius_fraction * mesh.bbox_diagonal(),
                azimuth_bins: bins[0],
                elevation_bins: bins[1],
                radial_bins: bins[2],
                hist_bins: bins[3],
            };
            compute_shot(mesh, &params)?
        }
        DescriptorSettings::Hks { times } => compute_hks(basis, *times)?,
        DescriptorSettings::External { dir } => {
            let path = dir.join(format!("{}.csv", shape_stem(mesh_path)));
            load_descriptors(&path, mesh.num_vertices())?
        }
    };
    Ok(field.into_values())
}

fn load_descriptor_cache(path: &Path, mesh_hash: &str, settings_hash: &str) -> Result<DMatrix<f64>> {
    let (h, payload): (DescriptorHeader, Vec<f64>) = io::read_container(path)?;
    if h.kind != "descriptors" || h.mesh_hash != mesh_hash || h.settings_hash != settings_hash {
        return Err(Error::StaleCache {
            path: path.to_path_buf(),
            reason: "mesh or descriptor settings changed".into(),
        });
    }
    if payload.len() != h.n * h.d {
        return Err(Error::InvalidData(format!("{}: payload size mismatch", path.display())));
    }
    Ok(DMatrix::from_row_slice(h.n, h.d, &payload))
}

fn save_descriptor_cache(path: &Path, values: &DMatrix<f64>, mesh_hash: &str, settings_hash: &str) -> Result<()> {
    let header = DescriptorHeader {
        kind: "descriptors".into(),
        mesh_hash: mesh_hash.into(),
        settings_hash: settings_hash.into(),
        n: values.nrows(),
        d: values.ncols(),
    };
    let mut payload = Vec::with_capacity(values.len());
    for r in 0..values.nrows() {
        payload.extend(values.row(r).iter());
    }
    io::write_container(path, &header, &payload)
}

fn cached_basis(path: &Path, mesh: &TriangleMesh, k: usize) -> Option<LaplaceBasis> {
    let b = LaplaceBasis::load(path, Some(&mesh.content_hash())).ok()?;
    (b.k() == k).then_some(b)
}

/// Basis and descriptors for one shape, from cache when up to date.
pub fn precompute_shape(config: &PipelineConfig, shape: &Path) -> Result<(ShapeData, PrecomputeReport)> {
    let mesh = load_mesh(shape, None)?;
    let paths = cache_paths(config, shape);
    let mesh_hash = mesh.content_hash();
    let settings_hash = config.descriptor_hash();

    let t = Instant::now();
    let (basis, basis_cached) = match cached_basis(&paths.basis, &mesh, config.k) {
        Some(b) => (b, true),
        None => {
            let b = compute_basis(&mesh, config.k)?;
            b.save(&paths.basis)?;
            (b, false)
        }
    };
    let basis_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (desc, desc_cached) = match load_descriptor_cache(&paths.descriptors, &mesh_hash, &settings_hash) {
        Ok(d) => (d, true),
        Err(_) => {
            let d = compute_descriptors(&mesh, &basis, &config.descriptors, shape)?;
            save_descriptor_cache(&paths.descriptors, &d, &mesh_hash, &settings_hash)?;
            (d, false)
        }
    };
    let descriptor_seconds = t.elapsed().as_secs_f64();
    let status = if basis_cached && desc_cached {
        CacheStatus::Cached
    } else {
        CacheStatus::Computed
    };
    let data = ShapeData::new(shape_stem(shape), basis, desc)?;
    Ok((
        data,
        PrecomputeReport {
            shape: shape.to_path_buf(),
            status,
            basis_seconds,
            descriptor_seconds,
        },
    ))
}

/// Loads existing caches without computing anything.
pub fn load_cached_shape(config: &PipelineConfig, shape: &Path) -> Result<ShapeData> {
    let mesh = load_mesh(shape, None)?;
    let paths = cache_paths(config, shape);
    let missing = |p: &Path| {
        Error::InvalidData(format!(
            "no cache at {} for {}; run `specmatch precompute` first",
            p.display(),
            shape.display()
        ))
    };
    if !paths.basis.exists() {
        return Err(missing(&paths.basis));
    }
    if !paths.descriptors.exists() {
        return Err(missing(&paths.descriptors));
    }
    let basis = LaplaceBasis::load(&paths.basis, Some(&mesh.content_hash()))?;
    if basis.k() != config.k {
        return Err(Error::StaleCache {
            path: paths.basis,
            reason: format!("cached k = {}, configured k = {}", basis.k(), config.k),
        });
    }
    let desc = load_descriptor_cache(&paths.descriptors, &mesh.content_hash(), &config.descriptor_hash())?;
    ShapeData::new(shape_stem(shape), basis, desc)
}

pub fn load_shape(config: &PipelineConfig, shape: &Path, auto_precompute: bool) -> Result<ShapeData> {
    if auto_precompute {
        precompute_shape(config, shape).map(|r| r.0)
    } else {
        load_cached_shape(config, shape)
    }
}

fn with_shape<T>(shape: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidParameter(m) => Error::InvalidParameter(format!("{}: {m}", shape.display())),
        Error::InvalidMesh(m) => Error::InvalidMesh(format!("{}: {m}", shape.display())),
        Error::Numerical(m) => Error::Numerical(format!("{}: {m}", shape.display())),
        Error::EigenNonConvergence(m) => Error::EigenNonConvergence(format!("{}: {m}", shape.display())),
        other => other,
    })
}

pub fn cmd_precompute(config: &PipelineConfig) -> Result<Vec<PrecomputeReport>> {
    if config.shapes.is_empty() {
        return Err(Error::InvalidParameter("no shapes given".into()));
    }
    config
        .shapes
        .iter()
        .map(|s| with_shape(s, precompute_shape(config, s)).map(|r| r.1))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: f64,
    pub final_components: [f64; 4],
    pub skipped_updates: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub config_hash: String,
}

pub fn checkpoint_path(config: &PipelineConfig) -> PathBuf {
    config.out.join("checkpoint.bin")
}

pub fn cmd_train(config: &PipelineConfig, auto_precompute: bool) -> Result<TrainSummary> {
    config.train.validate()?;
    if config.shapes.len() < 2 {
        return Err(Error::InvalidParameter("training needs at least two shapes".into()));
    }
    let mut train_cfg = config.train.clone();
    train_cfg.k = config.k;
    let shapes = config
        .shapes
        .iter()
        .map(|s| with_shape(s, load_shape(config, s, auto_precompute)))
        .collect::<Result<Vec<_>>>()?;
    let pairing = if config.pairs.is_empty() {
        Pairing::AllPairs
    } else {
        Pairing::Given(config.pairs.clone())
    };
    let outcome = train_with(&shapes, &pairing, &train_cfg, None, |step, _, rec| {
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.6e}", rec.loss);
        }
        Ok(())
    })?;
    let hash = train_cfg.hash();
    let ckpt = checkpoint_path(config);
    let log_path = config.out.join("train_log.csv");
    outcome.params.save(&ckpt, &hash)?;
    write_history(&log_path, &outcome.history)?;
    let last = outcome.history.last();
    let summary = TrainSummary {
        iterations: outcome.history.len(),
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        final_components: last.map_or([f64::NAN; 4], |r| r.components),
        skipped_updates: outcome.history.iter().filter(|r| !r.applied).count(),
        checkpoint: ckpt,
        log: log_path,
        config_hash: hash,
    };
    io::write_atomic(
        &config.out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct MatchOptions {
    pub source: PathBuf,
    pub target: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Weight of the Laplacian commutativity term in the map solve.
    pub alpha: f64,
    pub refine: bool,
    pub icp_iters: usize,
    /// Swap source and target.
    pub reverse: bool,
    pub auto_precompute: bool,
}

/// Default commutativity weight of the axiomatic baseline.
pub const AXIOMATIC_ALPHA: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub fmap: DMatrix<f64>,
    pub map: PointMap,
    pub fmap_path: PathBuf,
    pub map_path: PathBuf,
}

/// Map between two loaded shapes: the regularized solve on raw descriptors,
/// or on descriptors transformed by `params`.
pub fn match_shapes(
    s1: &ShapeData,
    s2: &ShapeData,
    k: usize,
    params: Option<&MlpParams>,
    alpha: f64,
    refine: Option<usize>,
) -> Result<(DMatrix<f64>, PointMap)> {
    let k = k.min(s1.basis.k()).min(s2.basis.k());
    let c = match params {
        Some(p) => fmap_ours_opt(p, s1, s2, k, alpha)?,
        None => {
            let b1 = s1.basis.truncated(k)?;
            let b2 = s2.basis.truncated(k)?;
            let a1 = b1.project_columns(&s1.descriptors)?;
            let a2 = b2.project_columns(&s2.descriptors)?;
            solve_fmap_regularized(&a1, &a2, b1.eigenvalues(), b2.eigenvalues(), alpha)?
        }
    };
    match refine {
        Some(iters) => {
            let r = icp_refine(&c, &s1.basis, &s2.basis, iters, 0.0)?;
            Ok((r.fmap, r.map))
        }
        None => {
            let t = fmap_to_p2p(&c, &s1.basis, &s2.basis)?;
            Ok((c, t))
        }
    }
}

pub fn cmd_match(config: &PipelineConfig, opts: &MatchOptions) -> Result<MatchOutput> {
    let (src, tgt) = if opts.reverse {
        (&opts.target, &opts.source)
    } else {
        (&opts.source, &opts.target)
    };
    let s1 = with_shape(src, load_shape(config, src, opts.auto_precompute))?;
    let s2 = with_shape(tgt, load_shape(config, tgt, opts.auto_precompute))?;
    let params = match &opts.checkpoint {
        Some(p) => {
            let (params, _) = MlpParams::load(p)?;
            if params.dim() != s1.dim() {
                return Err(Error::DimensionMismatch {
                    context: "checkpoint width vs descriptor dimension",
                    expected: s1.dim(),
                    actual: params.dim(),
                });
            }
            Some(params)
        }
        None => None,
    };
    let refine = opts.refine.then_some(opts.icp_iters.max(1));
    let (fmap, map) = match_shapes(&s1, &s2, config.k, params.as_ref(), opts.alpha, refine)?;
    let tag = format!("{}_to_{}", s1.name, s2.name);
    let fmap_path = config.out.join(format!("{tag}.fmap.csv"));
    let map_path = config.out.join(format!("{tag}.map.txt"));
    io::write_matrix_csv(&fmap_path, &fmap)?;
    let header = format!(
        "source={} target={} direction=target_to_source method={}{}",
        s1.name,
        s2.name,
        if params.is_some() { "learned" } else { "axiomatic" },
        if opts.refine { "+icp" } else { "" }
    );
    map.save(&map_path, Some(&header))?;
    Ok(MatchOutput {
        fmap,
        map,
        fmap_path,
        map_path,
    })
}

pub fn default_icp_iters() -> usize {
    DEFAULT_ICP_ITERS
}

pub fn cmd_eval(map: &Path, gt: &Path, source_mesh: &Path, out: &Path) -> Result<ErrorReport> {
    let mesh = load_mesh(source_mesh, None)?;
    let n = mesh.num_vertices();
    let map = PointMap::load(map, Some(n))?;
    let gt = PointMap::load(gt, Some(n))?;
    if map.len() != gt.len() {
        return Err(Error::InvalidData(format!(
            "map has {} entries, ground truth has {}",
            map.len(),
            gt.len()
        )));
    }
    let report = geodesic_error(&map, &gt, &mesh)?;
    report.save(&out.join("eval.json"), &out.join("eval_curve.csv"))?;
    Ok(report)
}
