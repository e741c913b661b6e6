//! Exact k-d tree over points of arbitrary dimension.

use std::cmp::Ordering;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    /// Row-major copy of the points.
    points: Vec<f64>,
    /// Point ids in leaf order.
    order: Vec<usize>,
    root: Node,
}

impl KdTree {
    /// Builds from `count` points stored row-major in `points`.
    pub fn new(points: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0, "k-d tree needs a positive dimension");
        assert_eq!(points.len() % dim, 0, "point buffer is not a multiple of dim");
        let count = points.len() / dim;
        let mut order: Vec<usize> = (0..count).collect();
        let root = build(&points, dim, &mut order, 0, count);
        KdTree {
            dim,
            points,
            order,
            root,
        }
    }

    /// Builds from the rows of a matrix.
    pub fn from_rows(m: &nalgebra::DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut pts = Vec::with_capacity(r * c);
        for i in 0..r {
            pts.extend(m.row(i).iter());
        }
        KdTree::new(pts, c.max(1))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest point `(index, squared distance)`. Equidistant points resolve to
    /// the smallest index.
    pub fn nearest(&self, query: &[f64]) -> Option<(usize, f64)> {
        assert_eq!(query.len(), self.dim);
        if self.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(&self.root, query, &mut best);
        Some(best)
    }

    fn nearest_in(&self, node: &Node, q: &[f64], best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d = sq_dist(self.point(i), q);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                // `<=` keeps exploring equal-distance candidates for the tie rule
                if diff * diff <= best.1 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// All points within `radius` (inclusive), in ascending index order.
    pub fn within_radius(&self, query: &[f64], radius: f64) -> Vec<usize> {
        assert_eq!(query.len(), self.dim);
        let mut out = Vec::new();
        self.radius_in(&self.root, query, radius * radius, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_in(&self, node: &Node, q: &[f64], r2: f64, out: &mut Vec<usize>) {
        match node {
            Node::Leaf { start, end } => {
                out.extend(
                    self.order[*start..*end]
                        .iter()
                        .copied()
                        .filter(|&i| sq_dist(self.point(i), q) <= r2),
                );
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.radius_in(left, q, r2, out);
                }
                if diff > 0.0 || diff * diff <= r2 {
                    self.radius_in(right, q, r2, out);
                }
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn build(points: &[f64], dim: usize, order: &mut [usize], start: usize, end: usize) -> Node {
    if end - start <= LEAF_SIZE {
        return Node::Leaf { start, end };
    }
    let slice = &mut order[start..end];
    // split on the axis of largest spread
    let mut best_axis = 0;
    let mut best_spread = -1.0;
    for axis in 0..dim {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in slice.iter() {
            let v = points[i * dim + axis];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > best_spread {
            best_spread = hi - lo;
            best_axis = axis;
        }
    }
    if best_spread <= 0.0 {
        return Node::Leaf { start, end };
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a * dim + best_axis]
            .partial_cmp(&points[b * dim + best_axis])
            .unwrap_or(Ordering::Equal)
    });
    let value = points[slice[mid] * dim + best_axis];
    // everything in [start, start+mid) is <= value, [start+mid, end) is >= value
    let left = build(points, dim, order, start, start + mid);
    let right = build(points, dim, order, start + mid, end);
    Node::Split {
        dim: best_axis,
        value,
        left: Box::new(left),
        right: Box::new(right),
    }
}
