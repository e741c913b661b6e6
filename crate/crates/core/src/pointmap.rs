//! Vertex-to-vertex maps: extraction from functional maps by nearest
//! neighbors in the spectral embedding, conversion back, and spectral ICP.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::io;
use crate::kdtree::KdTree;
use crate::spectral::LaplaceBasis;

pub const DEFAULT_ICP_ITERS: usize = 30;

/// `T: S2 → S1`, stored as the source vertex of every target vertex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointMap {
    pub target_to_source: Vec<usize>,
}

impl PointMap {
    pub fn new(target_to_source: Vec<usize>, source_len: usize) -> Result<Self> {
        if let Some((y, &x)) = target_to_source.iter().enumerate().find(|(_, &x)| x >= source_len) {
            return Err(Error::InvalidData(format!(
                "point map entry {y} is {x}, source has {source_len} vertices"
            )));
        }
        Ok(PointMap { target_to_source })
    }

    pub fn identity(n: usize) -> Self {
        PointMap {
            target_to_source: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.target_to_source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_to_source.is_empty()
    }

    /// Fraction of entries equal to their own index.
    pub fn identity_fraction(&self) -> f64 {
        if self.is_empty() {
            return 1.0;
        }
        let hits = self.target_to_source.iter().enumerate().filter(|(y, x)| *y == **x).count();
        hits as f64 / self.len() as f64
    }

    /// Fraction of entries that agree with `other`.
    pub fn agreement(&self, other: &PointMap) -> f64 {
        let n = self.len().min(other.len()).max(1);
        let same = self
            .target_to_source
            .iter()
            .zip(&other.target_to_source)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / n as f64
    }

    /// One index per line, preceded by an optional `#` comment.
    pub fn to_text(&self, header: Option<&str>) -> String {
        let mut out = String::with_capacity(self.len() * 6);
        if let Some(h) = header {
            for line in h.lines() {
                out.push_str("# ");
                out.push_str(line);
                out.push('\n');
            }
        }
        for x in &self.target_to_source {
            out.push_str(&x.to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path, header: Option<&str>) -> Result<()> {
        io::write_atomic(path, self.to_text(header).as_bytes())
    }

    /// Parses the text format. `source_len` bounds the entries when known.
    pub fn parse(text: &str, path: &Path, source_len: Option<usize>) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v = line.parse::<usize>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected a non-negative vertex index, found {line:?}"),
            })?;
            entries.push(v);
        }
        match source_len {
            Some(n) => PointMap::new(entries, n),
            None => Ok(PointMap {
                target_to_source: entries,
            }),
        }
    }

    pub fn load(path: &Path, source_len: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PointMap::parse(&text, path, source_len)
    }
}

fn check_fmap(c12: &DMatrix<f64>, basis1: &LaplaceBasis, basis2: &LaplaceBasis) -> Result<()> {
    let (k2, k1) = c12.shape();
    if k1 == 0 || k2 == 0 {
        return Err(Error::InvalidParameter("functional map is empty (k = 0)".into()));
    }
    if k1 > basis1.k() || k2 > basis2.k() {
        return Err(Error::DimensionMismatch {
            context: "functional map vs basis sizes",
            expected: basis1.k().min(basis2.k()),
            actual: k1.max(k2),
        });
    }
    Ok(())
}

/// Nearest-neighbor map and its mean embedding residual
/// `mean_y ‖(Φ2 C12)_y − (Φ1)_{T(y)}‖`.
pub fn fmap_to_p2p_with_residual(
    c12: &DMatrix<f64>,
    basis1: &LaplaceBasis,
    basis2: &LaplaceBasis,
) -> Result<(PointMap, f64)> {
    check_fmap(c12, basis1, basis2)?;
    let (k2, k1) = c12.shape();
    let source = basis1.eigenfunctions().columns(0, k1).into_owned();
    let target = basis2.eigenfunctions().columns(0, k2) * c12;
    let tree = KdTree::from_rows(&source);
    let hits: Vec<(usize, f64)> = (0..target.nrows())
        .into_par_iter()
        .map(|y| {
            let q: Vec<f64> = target.row(y).iter().copied().collect();
            let (x, d2) = tree.nearest(&q).expect("source basis is non-empty");
            (x, d2.sqrt())
        })
        .collect();
    let residual = hits.iter().map(|h| h.1).sum::<f64>() / hits.len().max(1) as f64;
    let map = PointMap {
        target_to_source: hits.into_iter().map(|h| h.0).collect(),
    };
    Ok((map, residual))
}

/// For every vertex of shape 2, the vertex of shape 1 whose spectral
/// embedding is closest to its image under `C12`.
pub fn fmap_to_p2p(c12: &DMatrix<f64>, basis1: &LaplaceBasis, basis2: &LaplaceBasis) -> Result<PointMap> {
    fmap_to_p2p_with_residual(c12, basis1, basis2).map(|r| r.0)
}

/// `C12 = Φ2ᵀ M2 Φ1[T]` on the full bases.
pub fn p2p_to_fmap(map: &PointMap, basis1: &LaplaceBasis, basis2: &LaplaceBasis) -> Result<DMatrix<f64>> {
    check_dim("point map length", basis2.num_vertices(), map.len())?;
    let n1 = basis1.num_vertices();
    let phi1 = basis1.eigenfunctions();
    let pulled = DMatrix::from_fn(map.len(), basis1.k(), |y, c| {
        let x = map.target_to_source[y];
        assert!(x < n1, "point map entry out of range");
        phi1[(x, c)]
    });
    Ok(basis2.pseudo_inverse() * pulled)
}

/// Orthogonal `C` minimizing `‖Φ2 C − Φ1[T]‖` (unweighted).
fn procrustes(map: &PointMap, phi1: &DMatrix<f64>, phi2: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let k = phi1.ncols();
    let mut cross = DMatrix::zeros(k, k);
    for (y, &x) in map.target_to_source.iter().enumerate() {
        // Φ2ᵀ Φ1[T] accumulated row by row
        cross.ger(1.0, &phi2.row(y).transpose(), &phi1.row(x).transpose(), 1.0);
    }
    let svd = cross.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let q = u * vt;
    q.iter().all(|v| v.is_finite()).then_some(q)
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub fmap: DMatrix<f64>,
    pub map: PointMap,
    /// Mean embedding residual of every accepted iterate.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// Alternates nearest-neighbor correspondence and orthogonal Procrustes.
///
/// Stops when the fraction of changed correspondences is at most `tol`
/// (`0` means an exact fixed point) or after `max_iters` Procrustes updates.
/// An update that would increase the residual is rejected and ends the loop.
/// Requires a square map.
pub fn icp_refine(
    c12: &DMatrix<f64>,
    basis1: &LaplaceBasis,
    basis2: &LaplaceBasis,
    max_iters: usize,
    tol: f64,
) -> Result<IcpResult> {
    check_fmap(c12, basis1, basis2)?;
    let (k2, k1) = c12.shape();
    if k1 != k2 {
        return Err(Error::InvalidParameter(format!(
            "ICP refinement needs a square map, got {k2} × {k1}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidParameter("ICP needs max_iters ≥ 1".into()));
    }
    let phi1 = basis1.eigenfunctions().columns(0, k1).into_owned();
    let phi2 = basis2.eigenfunctions().columns(0, k2).into_owned();

    let (mut map, _) = fmap_to_p2p_with_residual(c12, basis1, basis2)?;
    let mut fmap: Option<DMatrix<f64>> = None;
    let mut residuals = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        let Some(next) = procrustes(&map, &phi1, &phi2) else {
            log::warn!("ICP: SVD failed on a degenerate correspondence; keeping last iterate");
            break;
        };
        let (next_map, res) = fmap_to_p2p_with_residual(&next, basis1, basis2)?;
        if let Some(&last) = residuals.last() {
            if res > last {
                log::debug!("ICP: residual would rise from {last:.6e} to {res:.6e}; stopping");
                break;
            }
        }
        iterations += 1;
        let changed = 1.0 - next_map.agreement(&map);
        fmap = Some(next);
        map = next_map;
        residuals.push(res);
        if changed <= tol {
            break;
        }
    }
    let fmap = match fmap {
        Some(f) => f,
        None => {
            // first Procrustes failed; orthogonalize the input directly
            let svd = c12.clone().svd(true, true);
            match (svd.u, svd.v_t) {
                (Some(u), Some(vt)) => u * vt,
                _ => return Err(Error::Numerical("SVD of the input functional map failed".into())),
            }
        }
    };
    Ok(IcpResult {
        fmap,
        map,
        residuals,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{compute_basis, complete_basis};
    use crate::synthetic;

    #[test]
    fn text_round_trip() {
        let m = PointMap::new(vec![2, 0, 1, 1], 3).unwrap();
        let text = m.to_text(Some("source=a target=b"));
        assert!(text.starts_with("# source=a"));
        let back = PointMap::parse(&text, Path::new("m.txt"), Some(3)).unwrap();
        assert_eq!(back, m);
        assert!(PointMap::parse(&text, Path::new("m.txt"), Some(2)).is_err());
        let err = PointMap::parse("1\nx\n", Path::new("m.txt"), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn identity_map_on_same_mesh() {
        let mesh = synthetic::bumpy_sphere(2, 0.2, 3);
        let b = compute_basis(&mesh, 20).unwrap();
        let t = fmap_to_p2p(&DMatrix::identity(20, 20), &b, &b).unwrap();
        assert_eq!(t.identity_fraction(), 1.0);
        let c = p2p_to_fmap(&t, &b, &b).unwrap();
        assert!((c - DMatrix::<f64>::identity(20, 20)).amax() < 1e-8);
    }

    #[test]
    fn constant_mode_maps_to_constant_mode() {
        let mesh = synthetic::wavy_grid(6, 5, 1);
        let scaled = mesh.scaled(1.7);
        let b1 = complete_basis(&mesh).unwrap();
        let b2 = complete_basis(&scaled).unwrap();
        let c = p2p_to_fmap(&PointMap::identity(30), &b1, &b2).unwrap();
        let expect = (b2.total_area() / b1.total_area()).sqrt();
        assert!((c[(0, 0)] - expect).abs() < 1e-6, "{} vs {expect}", c[(0, 0)]);
        for r in 1..30 {
            assert!(c[(r, 0)].abs() < 1e-6);
        }
    }

    #[test]
    fn single_mode_ties_to_first_vertex() {
        let mesh = synthetic::icosphere(1);
        let b = compute_basis(&mesh, 1).unwrap();
        let t = fmap_to_p2p(&DMatrix::identity(1, 1), &b, &b).unwrap();
        assert!(t.target_to_source.iter().all(|&x| x == 0));
    }

    #[test]
    fn empty_map_rejected() {
        let mesh = synthetic::icosphere(1);
        let b = compute_basis(&mesh, 4).unwrap();
        assert!(fmap_to_p2p(&DMatrix::zeros(0, 0), &b, &b).is_err());
        assert!(icp_refine(&DMatrix::identity(4, 3), &b, &b, 5, 0.0).is_err());
    }

    #[test]
    fn icp_fixed_point_is_stable() {
        let mesh = synthetic::bumpy_sphere(2, 0.2, 5);
        let b = compute_basis(&mesh, 12).unwrap();
        let c = DMatrix::identity(12, 12);
        let out = icp_refine(&c, &b, &b, 10, 0.0).unwrap();
        assert_eq!(out.iterations, 1);
        assert!((out.fmap - c).amax() < 1e-10);
        assert_eq!(out.map.identity_fraction(), 1.0);
    }
}
