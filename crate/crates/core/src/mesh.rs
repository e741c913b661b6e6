//! Triangle meshes: loading, validation and the few geometric primitives the
//! rest of the pipeline needs (lumped areas, normals, the edge graph).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Relative threshold on face area, in units of the squared bounding-box diagonal.
pub const DEGENERATE_AREA_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("off") => Some(MeshFormat::Off),
            Some("obj") => Some(MeshFormat::Obj),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    name: String,
}

impl TriangleMesh {
    /// Builds a mesh and checks index ranges, repeated indices and degenerate faces.
    pub fn new(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[usize; 3]>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let mesh = TriangleMesh {
            vertices,
            faces,
            name: name.into(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if n == 0 {
            return Err(Error::InvalidMesh("mesh has no vertices".into()));
        }
        if self.faces.is_empty() {
            return Err(Error::InvalidMesh("mesh has no faces".into()));
        }
        if let Some(p) = self.vertices.iter().find(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("non-finite vertex position {p:?}")));
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex {bad}, mesh has {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} repeats a vertex: {f:?}")));
            }
        }
        let diag = self.bbox_diagonal();
        let threshold = DEGENERATE_AREA_REL * diag * diag;
        let bad: Vec<usize> = self
            .face_areas()
            .iter()
            .enumerate()
            .filter(|(_, &a)| !(a > threshold))
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::DegenerateFaces {
                faces: bad,
                threshold,
            });
        }
        let nonmanifold = self.edge_face_counts().values().filter(|&&c| c > 2).count();
        if nonmanifold > 0 {
            log::warn!(
                "mesh '{}' has {nonmanifold} non-manifold edges; continuing",
                self.name
            );
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn corners(&self, face: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.vertices {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        (hi - lo).norm()
    }

    pub fn face_areas(&self) -> Vec<f64> {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.corners(f);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .collect()
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas().iter().sum()
    }

    /// Lumped (barycentric) vertex areas: each face gives a third of its area to each corner.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.vertices.len()];
        for (f, a) in self.faces.iter().zip(self.face_areas()) {
            for &v in f {
                areas[v] += a / 3.0;
            }
        }
        areas
    }

    /// Area-weighted vertex normals, unit length. Isolated vertices get a zero normal.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let [a, b, c] = self.corners(fi);
            // cross product norm is twice the area, so this is area weighting
            let n = (b - a).cross(&(c - a));
            for &v in f {
                normals[v] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    fn edge_face_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Undirected edge graph weighted by Euclidean edge length.
    pub fn edge_graph(&self) -> EdgeGraph {
        let mut keys: Vec<(usize, usize)> = self.edge_face_counts().into_keys().collect();
        keys.sort_unstable();
        let edges = keys
            .into_iter()
            .map(|(a, b)| (a, b, (self.vertices[a] - self.vertices[b]).norm()))
            .collect();
        EdgeGraph::from_edges(self.vertices.len(), edges)
    }

    /// Content hash over positions and faces (names are ignored).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        for p in &self.vertices {
            for c in p.coords.iter() {
                h.update(c.to_bits().to_le_bytes());
            }
        }
        h.update((self.faces.len() as u64).to_le_bytes());
        for f in &self.faces {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Applies `x -> rotation * x + translation` to every vertex.
    pub fn transformed(&self, rotation: &nalgebra::Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let mut out = self.clone();
        for p in &mut out.vertices {
            *p = Point3::from(rotation * p.coords + translation);
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for p in &mut out.vertices {
            *p = Point3::from(p.coords * s);
        }
        out
    }

    /// Reorders vertices so that new vertex `i` is old vertex `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.vertices.len();
        crate::error::check_dim("vertex permutation", n, order.len())?;
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::InvalidParameter("order is not a permutation".into()));
            }
            inverse[old] = new;
        }
        let vertices = order.iter().map(|&o| self.vertices[o]).collect();
        let faces = self
            .faces
            .iter()
            .map(|f| [inverse[f[0]], inverse[f[1]], inverse[f[2]]])
            .collect();
        Ok(TriangleMesh {
            vertices,
            faces,
            name: self.name.clone(),
        })
    }

    pub fn to_off_string(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 48);
        s.push_str("OFF\n");
        let _ = writeln!(s, "{} {} 0", self.vertices.len(), self.faces.len());
        for p in &self.vertices {
            let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
        }
        s
    }

    pub fn save_off(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_off_string().as_bytes())
    }
}

/// Undirected weighted graph in compressed adjacency form.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    edges: Vec<(usize, usize, f64)>,
    offsets: Vec<usize>,
    neighbors: Vec<(usize, f64)>,
}

impl EdgeGraph {
    pub fn from_edges(num_vertices: usize, edges: Vec<(usize, usize, f64)>) -> Self {
        let mut degree = vec![0usize; num_vertices + 1];
        for &(a, b, _) in &edges {
            degree[a + 1] += 1;
            degree[b + 1] += 1;
        }
        for i in 0..num_vertices {
            degree[i + 1] += degree[i];
        }
        let offsets = degree;
        let mut fill = offsets.clone();
        let mut neighbors = vec![(0, 0.0); offsets[num_vertices]];
        for &(a, b, w) in &edges {
            neighbors[fill[a]] = (b, w);
            fill[a] += 1;
            neighbors[fill[b]] = (a, w);
            fill[b] += 1;
        }
        EdgeGraph {
            edges,
            offsets,
            neighbors,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Unique edges `(a, b, length)` with `a < b`.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }
}

pub fn load_mesh(path: &Path, format: Option<MeshFormat>) -> Result<TriangleMesh> {
    let format = match format.or_else(|| MeshFormat::from_path(path)) {
        Some(f) => f,
        None => {
            return Err(Error::InvalidParameter(format!(
                "cannot infer mesh format of {}",
                path.display()
            )))
        }
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mesh")
        .to_string();
    match format {
        MeshFormat::Off => parse_off(&text, path, name),
        MeshFormat::Obj => parse_obj(&text, path, name),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("malformed number '{tok}'")))
}

fn parse_usize(tok: &str, path: &Path, line: usize) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("malformed index '{tok}'")))
}

/// Parses OFF text. Comments (`#`) and blank lines are skipped.
pub fn parse_off(text: &str, path: &Path, name: impl Into<String>) -> Result<TriangleMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (line_no, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut header_toks = header.split_whitespace();
    if header_toks.next() != Some("OFF") {
        return Err(parse_err(path, line_no, "expected 'OFF' header"));
    }
    // counts may follow the keyword on the same line
    let rest: Vec<&str> = header_toks.collect();
    let (counts_line, counts): (usize, Vec<&str>) = if rest.is_empty() {
        let (l, c) = lines
            .next()
            .ok_or_else(|| parse_err(path, line_no, "missing counts line"))?;
        (l, c.split_whitespace().collect())
    } else {
        (line_no, rest)
    };
    if counts.len() < 2 {
        return Err(parse_err(path, counts_line, "expected 'n m 0' counts"));
    }
    let n = parse_usize(counts[0], path, counts_line)?;
    let m = parse_usize(counts[1], path, counts_line)?;

    let mut vertices = Vec::with_capacity(n);
    for _ in 0..n {
        let (l, text) = lines
            .next()
            .ok_or_else(|| parse_err(path, counts_line, "unexpected end of file in vertices"))?;
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, l, "vertex line needs 3 coordinates"));
        }
        vertices.push(Point3::new(
            parse_f64(toks[0], path, l)?,
            parse_f64(toks[1], path, l)?,
            parse_f64(toks[2], path, l)?,
        ));
    }
    let mut faces = Vec::with_capacity(m);
    for _ in 0..m {
        let (l, text) = lines
            .next()
            .ok_or_else(|| parse_err(path, counts_line, "unexpected end of file in faces"))?;
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.is_empty() || toks[0] != "3" || toks.len() < 4 {
            return Err(parse_err(path, l, "only triangular faces '3 i j k' are supported"));
        }
        let mut f = [0usize; 3];
        for (slot, tok) in f.iter_mut().zip(&toks[1..4]) {
            let idx = parse_usize(tok, path, l)?;
            if idx >= n {
                return Err(parse_err(
                    path,
                    l,
                    format!("vertex index {idx} out of range (mesh has {n} vertices)"),
                ));
            }
            *slot = idx;
        }
        faces.push(f);
    }
    TriangleMesh::new(vertices, faces, name)
}

/// Parses OBJ text. Only `v` and `f` records are read; `f` accepts `i`, `i/t`,
/// `i//n` and `i/t/n` forms and negative (relative) indices.
pub fn parse_obj(text: &str, path: &Path, name: impl Into<String>) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let l = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<&str> = toks.collect();
                if c.len() < 3 {
                    return Err(parse_err(path, l, "vertex record needs 3 coordinates"));
                }
                vertices.push(Point3::new(
                    parse_f64(c[0], path, l)?,
                    parse_f64(c[1], path, l)?,
                    parse_f64(c[2], path, l)?,
                ));
            }
            Some("f") => {
                let c: Vec<&str> = toks.collect();
                if c.len() != 3 {
                    return Err(parse_err(path, l, "only triangular faces are supported"));
                }
                let mut f = [0usize; 3];
                for (slot, tok) in f.iter_mut().zip(&c) {
                    let head = tok.split('/').next().unwrap_or("");
                    let idx: i64 = head
                        .parse()
                        .map_err(|_| parse_err(path, l, format!("malformed index '{tok}'")))?;
                    let nv = vertices.len() as i64;
                    let zero_based = if idx > 0 { idx - 1 } else { nv + idx };
                    if idx == 0 || zero_based < 0 || zero_based >= nv {
                        return Err(parse_err(
                            path,
                            l,
                            format!("vertex index {idx} out of range ({nv} vertices so far)"),
                        ));
                    }
                    *slot = zero_based as usize;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces, name)
}
