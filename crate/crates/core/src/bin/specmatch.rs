use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use specmatch::error::{Error, ErrorKind, Result};
use specmatch::penalties::PenaltyWeights;
use specmatch::pipeline::{self, CacheStatus, DescriptorSettings, MatchOptions, PipelineConfig};
use specmatch::synthetic;

#[derive(Parser)]
#[command(name = "specmatch", version, about = "Spectral shape correspondence with learned descriptors")]
struct Cli {
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; caches live in `<out>/cache`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and cache Laplace bases and descriptors.
    Precompute(PrecomputeArgs),
    /// Train the descriptor network.
    Train(TrainArgs),
    /// Compute a functional map and a point map between two shapes.
    Match(MatchArgs),
    /// Same as `match --refine`.
    Refine(MatchArgs),
    /// Geodesic error of a point map against ground truth.
    Eval(EvalArgs),
    /// Write synthetic meshes.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct ShapeArgs {
    /// Mesh files (OFF or OBJ); overrides the config shape list.
    #[arg(long, num_args = 1..)]
    shapes: Vec<PathBuf>,
    /// Basis size.
    #[arg(long)]
    k: Option<usize>,
    /// Descriptor type.
    #[arg(long, value_enum)]
    descriptor: Option<DescriptorChoice>,
    /// Heat kernel time samples.
    #[arg(long, default_value_t = 16)]
    hks_times: usize,
    /// Directory of `<stem>.csv` descriptor files.
    #[arg(long)]
    descriptor_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DescriptorChoice {
    Shot,
    Hks,
    External,
}

#[derive(Args)]
struct PrecomputeArgs {
    #[command(flatten)]
    shapes: ShapeArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shapes: ShapeArgs,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_pairs: Option<usize>,
    #[arg(long)]
    points_per_shape: Option<usize>,
    #[arg(long)]
    e4_fraction: Option<f64>,
    /// Penalty weights `w1,w2,w3,w4`.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    layers: Option<usize>,
    /// Fail instead of computing missing caches.
    #[arg(long)]
    no_auto_precompute: bool,
}

#[derive(Args, Clone)]
struct MatchArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Trained network checkpoint.
    #[arg(long, conflicts_with = "axiomatic")]
    checkpoint: Option<PathBuf>,
    /// Use raw descriptors with the regularized solve.
    #[arg(long)]
    axiomatic: bool,
    /// Laplacian commutativity weight of the map solve.
    #[arg(long)]
    alpha: Option<f64>,
    /// Run ICP refinement.
    #[arg(long)]
    refine: bool,
    #[arg(long, default_value_t = pipeline::default_icp_iters())]
    icp_iters: usize,
    /// `forward` maps source functions to the target; `reverse` swaps them.
    #[arg(long, value_enum, default_value = "forward")]
    direction: Direction,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    descriptor: Option<DescriptorChoice>,
    #[arg(long)]
    no_auto_precompute: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Direction {
    Forward,
    Reverse,
}

#[derive(Args)]
struct EvalArgs {
    /// Point map to evaluate.
    #[arg(long)]
    map: PathBuf,
    /// Ground-truth point map.
    #[arg(long)]
    gt: PathBuf,
    /// Source mesh the maps point into.
    #[arg(long)]
    mesh: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "pair")]
    kind: SynthKind,
    /// Sphere subdivision frequency (pair, sphere) or grid side (grid).
    #[arg(long, default_value_t = 10)]
    size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Near-isometric blob pair with identity ground truth.
    Pair,
    Sphere,
    Tetrahedron,
    Grid,
}

fn apply_shape_args(cfg: &mut PipelineConfig, a: &ShapeArgs) -> Result<()> {
    if !a.shapes.is_empty() {
        cfg.shapes = a.shapes.clone();
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    apply_descriptor(cfg, a.descriptor, a.hks_times, a.descriptor_dir.clone())
}

fn apply_descriptor(
    cfg: &mut PipelineConfig,
    choice: Option<DescriptorChoice>,
    hks_times: usize,
    dir: Option<PathBuf>,
) -> Result<()> {
    match choice {
        None => {}
        Some(DescriptorChoice::Shot) => cfg.descriptors = DescriptorSettings::default(),
        Some(DescriptorChoice::Hks) => cfg.descriptors = DescriptorSettings::Hks { times: hks_times },
        Some(DescriptorChoice::External) => {
            let dir = dir.ok_or_else(|| {
                Error::InvalidParameter("--descriptor external needs --descriptor-dir".into())
            })?;
            cfg.descriptors = DescriptorSettings::External { dir };
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("--threads: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;

    match cli.command {
        Command::Precompute(a) => {
            apply_shape_args(&mut cfg, &a.shapes)?;
            for r in pipeline::cmd_precompute(&cfg)? {
                match r.status {
                    CacheStatus::Cached => println!("{}: cached", r.shape.display()),
                    CacheStatus::Computed => println!(
                        "{}: computed (basis {:.2}s, descriptors {:.2}s)",
                        r.shape.display(),
                        r.basis_seconds,
                        r.descriptor_seconds
                    ),
                }
            }
        }
        Command::Train(a) => {
            apply_shape_args(&mut cfg, &a.shapes)?;
            let t = &mut cfg.train;
            if let Some(v) = a.iterations {
                t.iterations = v;
            }
            if let Some(v) = a.learning_rate {
                t.learning_rate = v;
            }
            if let Some(v) = a.batch_pairs {
                t.batch_pairs = v;
            }
            if let Some(v) = a.points_per_shape {
                t.points_per_shape = v;
            }
            if let Some(v) = a.e4_fraction {
                t.e4_descriptor_fraction = v;
            }
            if let Some(w) = &a.weights {
                t.weights = PenaltyWeights::new(w[0], w[1], w[2], w[3])?;
            }
            if let Some(v) = a.layers {
                t.layers = v;
            }
            let w = t.weights;
            println!(
                "weights = ({:e}, {:e}, {:e}, {:e}), lr = {}, iterations = {}, batch = {}, points = {}, k = {}, seed = {}",
                w.bijectivity,
                w.orthogonality,
                w.laplacian,
                w.descriptor,
                t.learning_rate,
                t.iterations,
                t.batch_pairs,
                t.points_per_shape,
                cfg.k,
                cfg.seed
            );
            let s = pipeline::cmd_train(&cfg, !a.no_auto_precompute)?;
            let c = s.final_components;
            println!(
                "final loss {:.6e}: E1 {:.4e}, E2 {:.4e}, E3 {:.4e}, E4 {:.4e}",
                s.final_loss, c[0], c[1], c[2], c[3]
            );
            println!("checkpoint: {}", s.checkpoint.display());
            println!("log: {}", s.log.display());
        }
        Command::Match(a) => run_match(&mut cfg, a, false)?,
        Command::Refine(a) => run_match(&mut cfg, a, true)?,
        Command::Eval(a) => {
            let r = pipeline::cmd_eval(&a.map, &a.gt, &a.mesh, &cfg.out)?;
            println!(
                "mean {:.6e}, 95th percentile {:.6e}, max {:.6e} over {} points",
                r.mean, r.percentile95, r.max, r.num_points
            );
            println!("report: {}", cfg.out.join("eval.json").display());
        }
        Command::Synth(a) => {
            let meshes = match a.kind {
                SynthKind::Pair => {
                    let (m1, m2) = synthetic::near_isometric_pair(a.size, cfg.seed);
                    let n = m1.num_vertices();
                    let gt = specmatch::pointmap::PointMap::identity(n);
                    gt.save(&cfg.out.join("gt.map.txt"), Some("identity ground truth"))?;
                    vec![("template", m1), ("bent", m2)]
                }
                SynthKind::Sphere => vec![("sphere", synthetic::geodesic_sphere(a.size))],
                SynthKind::Tetrahedron => vec![("tetrahedron", synthetic::regular_tetrahedron(1.0))],
                SynthKind::Grid => vec![("grid", synthetic::wavy_grid(a.size, a.size, cfg.seed))],
            };
            for (name, m) in meshes {
                let path = cfg.out.join(format!("{name}.off"));
                m.save_off(&path)?;
                println!("{}: {} vertices", path.display(), m.num_vertices());
            }
        }
    }
    Ok(())
}

fn run_match(cfg: &mut PipelineConfig, a: MatchArgs, force_refine: bool) -> Result<()> {
    if let Some(k) = a.k {
        cfg.k = k;
    }
    apply_descriptor(cfg, a.descriptor, 16, None)?;
    if a.checkpoint.is_none() && !a.axiomatic {
        return Err(Error::InvalidParameter("match needs --checkpoint or --axiomatic".into()));
    }
    let alpha = a
        .alpha
        .unwrap_or(if a.axiomatic { pipeline::AXIOMATIC_ALPHA } else { 0.0 });
    let opts = MatchOptions {
        source: a.source,
        target: a.target,
        checkpoint: a.checkpoint,
        alpha,
        refine: a.refine || force_refine,
        icp_iters: a.icp_iters,
        reverse: a.direction == Direction::Reverse,
        auto_precompute: !a.no_auto_precompute,
    };
    let out = pipeline::cmd_match(cfg, &opts)?;
    println!("functional map: {}", out.fmap_path.display());
    println!("point map: {}", out.map_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
