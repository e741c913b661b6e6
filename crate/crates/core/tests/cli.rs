use std::path::Path;
use std::process::{Command, Output};

use specmatch::io::read_matrix_csv;
use specmatch::pointmap::PointMap;

fn specmatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specmatch"))
        .current_dir(dir)
        .args(["--out", "."])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// A temp dir holding a small synthetic pair with identity ground truth.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = specmatch(dir.path(), &["synth", "--kind", "pair", "--size", "4"]);
    assert_ok(&o);
    for f in ["template.off", "bent.off", "gt.map.txt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    dir
}

const HKS: [&str; 4] = ["--k", "10", "--descriptor", "hks"];

#[test]
fn precompute_then_cached() {
    let dir = workspace();
    let args = [&["precompute", "--shapes", "template.off", "bent.off"][..], &HKS[..]].concat();
    let first = specmatch(dir.path(), &args);
    assert_ok(&first);
    assert_eq!(stdout(&first).matches("computed").count(), 2, "{}", stdout(&first));
    let second = specmatch(dir.path(), &args);
    assert_ok(&second);
    assert_eq!(stdout(&second).matches(": cached").count(), 2, "{}", stdout(&second));
    assert!(dir.path().join("cache/template.basis.bin").exists());
}

#[test]
fn train_writes_log_and_checkpoint_then_match_uses_it() {
    let dir = workspace();
    let args = [
        &["train", "--shapes", "template.off", "bent.off", "--iterations", "5"][..],
        &["--batch-pairs", "1", "--points-per-shape", "100", "--layers", "2"][..],
        &HKS[..],
    ]
    .concat();
    let o = specmatch(dir.path(), &args);
    assert_ok(&o);
    let out = stdout(&o);
    assert!(out.starts_with("weights = (1e3, 1e3, 1e0, 1e5)"), "{out}");
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,E1,E2,E3,E4,wall_ms");
    assert_eq!(lines.len(), 6);
    assert!(dir.path().join("checkpoint.bin").exists());
    assert!(dir.path().join("train_summary.json").exists());

    let m = [
        &["match", "--source", "template.off", "--target", "bent.off"][..],
        &["--checkpoint", "checkpoint.bin", "--k", "10", "--descriptor", "hks"][..],
    ]
    .concat();
    assert_ok(&specmatch(dir.path(), &m));
    let map = PointMap::load(&dir.path().join("template_to_bent.map.txt"), Some(162)).unwrap();
    assert_eq!(map.len(), 162);
}

#[test]
fn axiomatic_self_match_is_identity() {
    let dir = workspace();
    let args = [&["match", "--source", "template.off", "--target", "template.off", "--axiomatic"][..], &HKS[..]].concat();
    assert_ok(&specmatch(dir.path(), &args));
    let map = PointMap::load(&dir.path().join("template_to_template.map.txt"), None).unwrap();
    assert!(map.identity_fraction() >= 0.99, "{}", map.identity_fraction());
    let header = std::fs::read_to_string(dir.path().join("template_to_template.map.txt")).unwrap();
    assert!(header.starts_with('#'));
}

#[test]
fn refine_gives_orthogonal_map_and_eval_reports() {
    let dir = workspace();
    let args = [&["refine", "--source", "template.off", "--target", "bent.off", "--axiomatic"][..], &HKS[..]].concat();
    assert_ok(&specmatch(dir.path(), &args));
    let c = read_matrix_csv(&dir.path().join("template_to_bent.fmap.csv")).unwrap();
    assert_eq!(c.shape(), (10, 10));
    let dev = (c.transpose() * &c - nalgebra::DMatrix::<f64>::identity(10, 10)).amax();
    assert!(dev < 1e-6, "refined map not orthogonal: {dev:e}");

    let o = specmatch(
        dir.path(),
        &["eval", "--map", "template_to_bent.map.txt", "--gt", "gt.map.txt", "--mesh", "template.off"],
    );
    assert_ok(&o);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    for key in ["num_points", "mean", "percentile95", "max", "unreachable"] {
        assert!(report.get(key).is_some(), "eval.json lacks {key}");
    }
    assert_eq!(report["num_points"], 162);
    let curve = std::fs::read_to_string(dir.path().join("eval_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("threshold,fraction"));
    let last = curve.lines().last().unwrap();
    let frac: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(frac, 1.0);
}

#[test]
fn eval_of_ground_truth_is_zero() {
    let dir = workspace();
    let o = specmatch(dir.path(), &["eval", "--map", "gt.map.txt", "--gt", "gt.map.txt", "--mesh", "template.off"]);
    assert_ok(&o);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["mean"], 0.0);
    assert_eq!(report["max"], 0.0);
}

#[test]
fn exit_codes() {
    let dir = workspace();
    // k ≥ n is a usage error
    let o = specmatch(dir.path(), &["precompute", "--shapes", "template.off", "--k", "500", "--descriptor", "hks"]);
    assert_eq!(o.status.code(), Some(2));
    // unknown subcommand
    assert_eq!(specmatch(dir.path(), &["frobnicate"]).status.code(), Some(2));
    // match needs a checkpoint or --axiomatic
    let o = specmatch(dir.path(), &["match", "--source", "template.off", "--target", "bent.off"]);
    assert_eq!(o.status.code(), Some(2));
    // missing mesh
    let o = specmatch(dir.path(), &["precompute", "--shapes", "nope.off"]);
    assert_eq!(o.status.code(), Some(3));
    // malformed mesh
    std::fs::write(dir.path().join("bad.off"), "OFF\n3 1 0\n0 0 0\n1 0\n").unwrap();
    let o = specmatch(dir.path(), &["precompute", "--shapes", "bad.off"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.off"));
    // missing cache without auto-precompute
    let o = specmatch(
        dir.path(),
        &["match", "--source", "template.off", "--target", "bent.off", "--axiomatic", "--no-auto-precompute"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("precompute"));
}
