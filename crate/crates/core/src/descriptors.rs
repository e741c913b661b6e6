//! Per-vertex descriptor fields: SHOT, heat kernel signatures, and externally
//! computed descriptors read from CSV.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::kdtree::KdTree;
use crate::mesh::TriangleMesh;
use crate::spectral::LaplaceBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Shot,
    Hks,
    External,
    Transformed,
}

/// `n × d` matrix, one row per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorField {
    values: DMatrix<f64>,
    kind: DescriptorKind,
}

impl DescriptorField {
    pub fn new(values: DMatrix<f64>, kind: DescriptorKind) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows().max(1), pos / values.nrows().max(1));
            return Err(Error::InvalidData(format!(
                "descriptor entry ({r}, {c}) is not finite"
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::InvalidData("descriptor dimension is zero".into()));
        }
        Ok(DescriptorField { values, kind })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn kind(&self) -> DescriptorKind {
        self.kind
    }

    pub fn num_vertices(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Rows at the given vertices.
    pub fn rows(&self, vertices: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(vertices.len(), self.dim(), |r, c| self.values[(vertices[r], c)])
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        io::write_matrix_csv(path, &self.values)
    }
}

/// One vertex per row, comma separated, no header.
pub fn load_descriptors(path: &Path, expected_n: usize) -> Result<DescriptorField> {
    let values = io::read_matrix_csv(path)?;
    if values.nrows() != expected_n {
        return Err(Error::InvalidData(format!(
            "{}: {} descriptor rows for a mesh with {expected_n} vertices",
            path.display(),
            values.nrows()
        )));
    }
    DescriptorField::new(values, DescriptorKind::External)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotParams {
    pub radius: f64,
    pub azimuth_bins: usize,
    pub elevation_bins: usize,
    pub radial_bins: usize,
    pub hist_bins: usize,
}

impl ShotParams {
    /// Default bin layout (8 × 2 × 2 sectors, 11 cosine bins: 352 values) with
    /// the support radius at 5% of the bounding-box diagonal.
    pub fn for_mesh(mesh: &TriangleMesh) -> Self {
        ShotParams {
            radius: 0.05 * mesh.bbox_diagonal(),
            ..ShotParams::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.azimuth_bins * self.elevation_bins * self.radial_bins * self.hist_bins
    }
}

impl Default for ShotParams {
    fn default() -> Self {
        ShotParams {
            radius: 0.0,
            azimuth_bins: 8,
            elevation_bins: 2,
            radial_bins: 2,
            hist_bins: 11,
        }
    }
}

/// Splits a continuous bin coordinate between the two nearest bin centres.
/// Returns `[(bin, weight); 2]`; out-of-range neighbours are clamped unless
/// `wrap` is set.
fn soft_bin(pos: f64, bins: usize, wrap: bool) -> [(usize, f64); 2] {
    let x = pos - 0.5;
    let lo = x.floor();
    let frac = x - lo;
    let lo = lo as i64;
    let fix = |b: i64| -> usize {
        if wrap {
            b.rem_euclid(bins as i64) as usize
        } else {
            b.clamp(0, bins as i64 - 1) as usize
        }
    };
    [(fix(lo), 1.0 - frac), (fix(lo + 1), frac)]
}

/// Local reference frame from the distance-weighted covariance of the
/// neighbourhood, with the x and z axes oriented towards the majority of
/// neighbours. Rows of the returned matrix are the x, y, z axes.
fn local_frame(center: Vector3<f64>, neighbors: &[Vector3<f64>], radius: f64) -> Option<Matrix3<f64>> {
    let mut cov = Matrix3::zeros();
    let mut total = 0.0;
    for q in neighbors {
        let v = q - center;
        let w = radius - v.norm();
        cov += w * v * v.transpose();
        total += w;
    }
    if !(total > 0.0) {
        return None;
    }
    cov /= total;
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut x: Vector3<f64> = eig.eigenvectors.column(idx[0]).into_owned();
    let mut z: Vector3<f64> = eig.eigenvectors.column(idx[2]).into_owned();
    let orient = |axis: &mut Vector3<f64>| {
        let (mut pos, mut neg, mut sum) = (0usize, 0usize, 0.0);
        for q in neighbors {
            let d = (q - center).dot(axis);
            sum += d;
            if d > 0.0 {
                pos += 1;
            } else if d < 0.0 {
                neg += 1;
            }
        }
        if neg > pos || (neg == pos && sum < 0.0) {
            *axis = -*axis;
        }
    };
    orient(&mut x);
    orient(&mut z);
    let y = z.cross(&x);
    Some(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]))
}

/// SHOT signatures: histograms of neighbour-normal cosines in spatial sectors
/// of an oriented local frame, soft-binned in all four coordinates and
/// L2-normalized per vertex.
pub fn compute_shot(mesh: &TriangleMesh, params: &ShotParams) -> Result<DescriptorField> {
    if !(params.radius > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "SHOT radius must be positive, got {}",
            params.radius
        )));
    }
    if params.dim() == 0 {
        return Err(Error::InvalidParameter("SHOT bin counts must be positive".into()));
    }
    let normals = mesh.vertex_normals();
    if let Some(v) = normals.iter().position(|n| !n.iter().all(|c| c.is_finite())) {
        return Err(Error::Numerical(format!("non-finite normal at vertex {v}")));
    }
    let positions: Vec<Vector3<f64>> = mesh.vertices().iter().map(|p| p.coords).collect();
    let tree = KdTree::new(positions.iter().flat_map(|p| p.iter().copied()).collect(), 3);

    let graph = mesh.edge_graph();
    let sparse = (0..mesh.num_vertices())
        .filter(|&v| {
            graph
                .neighbors(v)
                .iter()
                .map(|e| e.1)
                .fold(f64::INFINITY, f64::min)
                > params.radius
        })
        .count();
    if sparse > 0 {
        log::warn!(
            "SHOT radius {:.4} is below the shortest incident edge at {sparse} vertices",
            params.radius
        );
    }

    let dim = params.dim();
    let rows: Vec<Vec<f64>> = (0..mesh.num_vertices())
        .into_par_iter()
        .map(|v| shot_row(v, &positions, &normals, &tree, params))
        .collect();
    let values = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);
    DescriptorField::new(values, DescriptorKind::Shot)
}

fn shot_row(
    v: usize,
    positions: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    tree: &KdTree,
    p: &ShotParams,
) -> Vec<f64> {
    let mut hist = vec![0.0; p.dim()];
    let center = positions[v];
    let ids: Vec<usize> = tree
        .within_radius(center.as_slice(), p.radius)
        .into_iter()
        .filter(|&i| i != v)
        .collect();
    if ids.len() < 3 {
        return hist;
    }
    let pts: Vec<Vector3<f64>> = ids.iter().map(|&i| positions[i]).collect();
    let Some(frame) = local_frame(center, &pts, p.radius) else {
        return hist;
    };
    let z_axis: Vector3<f64> = frame.row(2).transpose();
    let (na, ne, nr, nh) = (p.azimuth_bins, p.elevation_bins, p.radial_bins, p.hist_bins);
    for (&i, q) in ids.iter().zip(&pts) {
        let local = frame * (q - center);
        let dist = local.norm();
        if dist == 0.0 {
            continue;
        }
        let cos = normals[i].dot(&z_axis).clamp(-1.0, 1.0);
        let azimuth = local.y.atan2(local.x);
        let elevation = (local.z / dist).clamp(-1.0, 1.0).asin();

        let hb = soft_bin((cos + 1.0) * 0.5 * nh as f64, nh, false);
        let ab = soft_bin((azimuth + std::f64::consts::PI) / std::f64::consts::TAU * na as f64, na, true);
        let eb = soft_bin(
            (elevation + std::f64::consts::FRAC_PI_2) / std::f64::consts::PI * ne as f64,
            ne,
            false,
        );
        let rb = soft_bin(dist / p.radius * nr as f64, nr, false);
        for &(a, wa) in &ab {
            for &(e, we) in &eb {
                for &(r, wr) in &rb {
                    let sector = (a * ne + e) * nr + r;
                    let w_sector = wa * we * wr;
                    if w_sector == 0.0 {
                        continue;
                    }
                    for &(h, wh) in &hb {
                        hist[sector * nh + h] += w_sector * wh;
                    }
                }
            }
        }
    }
    let norm = hist.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        hist.iter_mut().for_each(|x| *x /= norm);
    }
    hist
}

/// Heat kernel signature `Σ_i exp(−λ_i t) φ_i(x)²` at `num_times` times
/// log-spaced on `[4 ln 10 / λ_max, 4 ln 10 / λ_1]`, where `λ_1` is the first
/// nonzero eigenvalue.
pub fn compute_hks(basis: &LaplaceBasis, num_times: usize) -> Result<DescriptorField> {
    if num_times == 0 {
        return Err(Error::InvalidParameter("HKS needs at least one time".into()));
    }
    let lambda = basis.eigenvalues();
    let k = lambda.len();
    let times: Vec<f64> = if k == 1 {
        vec![1.0; num_times]
    } else {
        let top = lambda[k - 1];
        if !(lambda[1] > 1e-8 * top) {
            return Err(Error::InvalidData(
                "second Laplacian eigenvalue is zero (disconnected mesh); HKS time range undefined".into(),
            ));
        }
        let t_min = 4.0 * std::f64::consts::LN_10 / top;
        let t_max = 4.0 * std::f64::consts::LN_10 / lambda[1];
        if num_times == 1 {
            vec![t_min]
        } else {
            let (a, b) = (t_min.ln(), t_max.ln());
            (0..num_times)
                .map(|j| (a + (b - a) * j as f64 / (num_times - 1) as f64).exp())
                .collect()
        }
    };
    let phi = basis.eigenfunctions();
    let n = basis.num_vertices();
    let mut values = DMatrix::zeros(n, num_times);
    for (j, &t) in times.iter().enumerate() {
        let weights: Vec<f64> = lambda.iter().map(|l| (-l * t).exp()).collect();
        for r in 0..n {
            values[(r, j)] = phi
                .row(r)
                .iter()
                .zip(&weights)
                .map(|(p, w)| w * p * p)
                .sum();
        }
    }
    DescriptorField::new(values, DescriptorKind::Hks)
}

/// `count` distinct vertex indices drawn uniformly without replacement,
/// sorted. Asking for more than `n` returns every index.
pub fn sample_points(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n {
        if count > n {
            log::debug!("requested {count} samples from {n} points; using all points");
        }
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::compute_basis;
    use crate::synthetic;

    #[test]
    fn shot_has_352_unit_rows() {
        let mesh = synthetic::bumpy_sphere(3, 0.3, 1);
        let shot = compute_shot(&mesh, &ShotParams::for_mesh(&mesh)).unwrap();
        assert_eq!(shot.dim(), 352);
        for r in 0..shot.num_vertices() {
            let norm = shot.values().row(r).norm();
            assert!(norm.abs() < 1e-6 || (norm - 1.0).abs() < 1e-6, "row {r}: {norm}");
        }
    }

    #[test]
    fn shot_rotation_invariant() {
        let mesh = synthetic::bumpy_sphere(3, 0.3, 21);
        let rotated = mesh.transformed(&synthetic::random_rotation(4), &Vector3::new(0.3, -1.0, 2.0));
        let params = ShotParams {
            radius: 0.25,
            ..ShotParams::default()
        };
        let a = compute_shot(&mesh, &params).unwrap();
        let b = compute_shot(&rotated, &params).unwrap();
        let worst = (a.values() - b.values()).amax();
        assert!(worst < 1e-3, "max entry difference {worst}");
    }

    #[test]
    fn shot_deterministic() {
        let mesh = synthetic::bumpy_sphere(2, 0.3, 2);
        let p = ShotParams::for_mesh(&mesh);
        assert_eq!(compute_shot(&mesh, &p).unwrap(), compute_shot(&mesh, &p).unwrap());
    }

    #[test]
    fn shot_rejects_bad_radius() {
        let mesh = synthetic::icosphere(1);
        let p = ShotParams::default();
        assert!(compute_shot(&mesh, &p).is_err());
    }

    #[test]
    fn soft_bin_weights_sum_to_one() {
        for &pos in &[0.0, 0.3, 0.5, 3.99, 7.7, 8.0] {
            let b = soft_bin(pos, 8, true);
            assert!((b[0].1 + b[1].1 - 1.0).abs() < 1e-12);
            assert!(b[0].0 < 8 && b[1].0 < 8);
        }
    }

    #[test]
    fn hks_constant_mode_only() {
        let mesh = synthetic::bumpy_sphere(2, 0.2, 3);
        let basis = compute_basis(&mesh, 5).unwrap().truncated(1).unwrap();
        let hks = compute_hks(&basis, 4).unwrap();
        let area = mesh.total_area();
        for v in hks.values().iter() {
            assert!((v - 1.0 / area).abs() < 1e-9);
        }
    }

    #[test]
    fn hks_nonnegative_and_rigid_invariant() {
        let mesh = synthetic::bumpy_sphere(2, 0.3, 8);
        let rotated = mesh.transformed(&synthetic::random_rotation(1), &Vector3::zeros());
        let a = compute_hks(&compute_basis(&mesh, 20).unwrap(), 8).unwrap();
        let b = compute_hks(&compute_basis(&rotated, 20).unwrap(), 8).unwrap();
        assert!(a.values().iter().all(|v| *v >= 0.0));
        let rel = (a.values() - b.values()).amax() / a.values().amax();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn hks_on_sphere_is_nearly_constant() {
        let mesh = synthetic::icosphere(4);
        let basis = compute_basis(&mesh, 30).unwrap();
        let hks = compute_hks(&basis, 6).unwrap();
        for c in 0..hks.dim() {
            let col = hks.values().column(c);
            let mean = col.mean();
            let dev = col.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max) / mean;
            assert!(dev < 0.02, "column {c}: relative deviation {dev}");
        }
    }

    #[test]
    fn sampling_contract() {
        let a = sample_points(5000, 1500, 7);
        assert_eq!(a.len(), 1500);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, sample_points(5000, 1500, 7));
        assert_ne!(a, sample_points(5000, 1500, 8));
        assert_eq!(sample_points(1000, 1500, 1), (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn csv_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let field = DescriptorField::new(DMatrix::from_fn(5, 352, |r, c| (r * c) as f64 * 0.01), DescriptorKind::External).unwrap();
        field.save_csv(&path).unwrap();
        let back = load_descriptors(&path, 5).unwrap();
        assert_eq!(back.dim(), 352);
        assert_eq!(back.kind(), DescriptorKind::External);
        assert!(load_descriptors(&path, 6).is_err());

        std::fs::write(&path, "1,2\nNaN,3\n").unwrap();
        assert!(load_descriptors(&path, 2).is_err());
        std::fs::write(&path, "1,2\nabc,3\n").unwrap();
        assert!(load_descriptors(&path, 2).is_err());
    }
}
