//! Correspondence quality: graph geodesics, normalized geodesic errors,
//! cumulative error curves and loss/error correlation.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io;
use crate::mesh::{EdgeGraph, TriangleMesh};
use crate::pointmap::PointMap;

/// Upper end of the error-curve threshold grid.
pub const CURVE_MAX: f64 = 0.25;
pub const CURVE_STEP: f64 = 0.0025;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path distances from `source`; unreachable vertices get infinity.
/// With `targets`, the search stops once all of them are settled.
pub fn dijkstra(graph: &EdgeGraph, source: usize, targets: Option<&[usize]>) -> Vec<f64> {
    let n = graph.num_vertices();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut remaining = targets.map(|t| {
        let mut t = t.to_vec();
        t.sort_unstable();
        t.dedup();
        t.len()
    });
    let mut wanted = vec![false; if targets.is_some() { n } else { 0 }];
    if let Some(t) = targets {
        for &v in t {
            wanted[v] = true;
        }
    }
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, v)) = heap.pop() {
        if done[v] {
            continue;
        }
        done[v] = true;
        if let Some(r) = remaining.as_mut() {
            if wanted[v] {
                *r -= 1;
                if *r == 0 {
                    break;
                }
            }
        }
        for &(u, w) in graph.neighbors(v) {
            let nd = d + w;
            if nd < dist[u] {
                dist[u] = nd;
                heap.push(Entry(nd, u));
            }
        }
    }
    dist
}

/// Graph-geodesic distance rows from each source, computed in parallel.
pub fn geodesic_distances_from(mesh: &TriangleMesh, sources: &[usize]) -> Result<Vec<Vec<f64>>> {
    let n = mesh.num_vertices();
    if let Some(&s) = sources.iter().find(|&&s| s >= n) {
        return Err(Error::InvalidParameter(format!("source vertex {s} out of range 0..{n}")));
    }
    let graph = mesh.edge_graph();
    let rows: Vec<Vec<f64>> = sources.par_iter().map(|&s| dijkstra(&graph, s, None)).collect();
    let unreachable = rows.iter().flatten().filter(|d| d.is_infinite()).count();
    if unreachable > 0 {
        log::warn!("{unreachable} source/vertex pairs are disconnected; distances set to infinity");
    }
    Ok(rows)
}

/// Per-point errors and their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    #[serde(skip)]
    pub errors: Vec<f64>,
    pub num_points: usize,
    pub mean: f64,
    pub percentile95: f64,
    pub max: f64,
    /// Points whose image is disconnected from the ground truth.
    pub unreachable: usize,
    /// `(threshold, fraction of errors ≤ threshold)`.
    #[serde(skip)]
    pub curve: Vec<(f64, f64)>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl ErrorReport {
    pub fn from_errors(errors: Vec<f64>) -> Self {
        let n = errors.len();
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = if n == 0 { 0.0 } else { errors.iter().sum::<f64>() / n as f64 };
        let max = sorted.last().copied().unwrap_or(0.0);
        let steps = (CURVE_MAX / CURVE_STEP).round() as usize;
        let fraction = |t: f64| {
            if n == 0 {
                return 1.0;
            }
            sorted.partition_point(|&e| e <= t) as f64 / n as f64
        };
        let mut curve: Vec<(f64, f64)> = (0..=steps)
            .map(|i| {
                let t = i as f64 * CURVE_STEP;
                (t, fraction(t))
            })
            .collect();
        if max > CURVE_MAX && max.is_finite() {
            curve.push((max, 1.0));
        }
        ErrorReport {
            num_points: n,
            mean,
            percentile95: nearest_rank(&sorted, 95.0),
            max,
            unreachable: errors.iter().filter(|e| e.is_infinite()).count(),
            errors,
            curve,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("threshold,fraction\n");
        for (t, f) in &self.curve {
            out.push_str(&format!("{t},{f}\n"));
        }
        out
    }

    pub fn save(&self, json_path: &Path, curve_path: &Path) -> Result<()> {
        io::write_atomic(json_path, self.to_json().as_bytes())?;
        io::write_atomic(curve_path, self.curve_csv().as_bytes())
    }
}

/// `d_geo(map(y), gt(y)) / √area(source)` for every target vertex `y`.
pub fn geodesic_error(map: &PointMap, gt: &PointMap, source_mesh: &TriangleMesh) -> Result<ErrorReport> {
    check_dim("point map vs ground truth length", gt.len(), map.len())?;
    let n = source_mesh.num_vertices();
    for (name, m) in [("map", map), ("ground truth", gt)] {
        if let Some(&x) = m.target_to_source.iter().find(|&&x| x >= n) {
            return Err(Error::InvalidData(format!(
                "{name} entry {x} is outside the source mesh (0..{n})"
            )));
        }
    }
    let graph = source_mesh.edge_graph();
    let scale = 1.0 / source_mesh.total_area().sqrt();

    // one truncated Dijkstra per distinct ground-truth vertex
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for (y, &g) in gt.target_to_source.iter().enumerate() {
        groups.entry(g).or_default().push(y);
    }
    let mut groups: Vec<(usize, Vec<usize>)> = groups.into_iter().collect();
    groups.sort_unstable_by_key(|g| g.0);
    let per_group: Vec<Vec<(usize, f64)>> = groups
        .par_iter()
        .map(|(g, ys)| {
            let targets: Vec<usize> = ys.iter().map(|&y| map.target_to_source[y]).collect();
            let dist = dijkstra(&graph, *g, Some(&targets));
            ys.iter().zip(&targets).map(|(&y, &t)| (y, dist[t] * scale)).collect()
        })
        .collect();
    let mut errors = vec![0.0; map.len()];
    for (y, e) in per_group.into_iter().flatten() {
        errors[y] = e;
    }
    let report = ErrorReport::from_errors(errors);
    if report.unreachable > 0 {
        log::warn!("{} points map to a component disconnected from their ground truth", report.unreachable);
    }
    Ok(report)
}

/// Pearson correlation coefficient.
pub fn correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim("correlation series lengths", x.len(), y.len())?;
    if x.len() < 3 {
        return Err(Error::InvalidParameter("correlation needs at least 3 samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 || !(sxx * syy).is_finite() {
        return Err(Error::InvalidParameter("correlation of a constant or non-finite series is undefined".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
