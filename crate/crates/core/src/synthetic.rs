//! Synthetic meshes for tests, benchmarks and the evaluation harness when no
//! scanned dataset is available.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mesh::TriangleMesh;

pub fn equilateral_triangle(edge: f64) -> TriangleMesh {
    let h = edge * 3f64.sqrt() / 2.0;
    TriangleMesh::new(
        vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(edge, 0.0, 0.0),
            Point3::new(edge / 2.0, h, 0.0),
        ],
        vec![[0, 1, 2]],
        "triangle",
    )
    .expect("valid triangle")
}

/// Right isoceles triangle with unit legs; the hypotenuse is edge (1, 2).
pub fn right_isoceles_triangle() -> TriangleMesh {
    TriangleMesh::new(
        vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ],
        vec![[0, 1, 2]],
        "right_triangle",
    )
    .expect("valid triangle")
}

/// Unit square split into two triangles along the (1, 3) diagonal.
pub fn unit_square() -> TriangleMesh {
    TriangleMesh::new(
        vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ],
        vec![[0, 1, 3], [1, 2, 3]],
        "square",
    )
    .expect("valid square")
}

pub fn regular_tetrahedron(edge: f64) -> TriangleMesh {
    let s = edge / (2.0 * 2f64.sqrt());
    let v = vec![
        Point3::new(s, s, s),
        Point3::new(s, -s, -s),
        Point3::new(-s, s, -s),
        Point3::new(-s, -s, s),
    ];
    TriangleMesh::new(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], "tetrahedron")
        .expect("valid tetrahedron")
}

fn icosahedron() -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let v = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let f = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (v, f)
}

/// Unit geodesic sphere: every icosahedron face split into `frequency²`
/// triangles, projected to the sphere. Has `10·frequency² + 2` vertices.
pub fn geodesic_sphere(frequency: usize) -> TriangleMesh {
    let nu = frequency.max(1);
    let (base, base_faces) = icosahedron();
    let mut index: HashMap<Vec<(usize, usize)>, usize> = HashMap::new();
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces = Vec::new();

    let mut vertex_at = |corner: [usize; 3], w: [usize; 3]| -> usize {
        // identify a lattice point by its exact integer barycentric weights
        let mut key: Vec<(usize, usize)> = corner
            .iter()
            .zip(w.iter())
            .filter(|(_, &wi)| wi > 0)
            .map(|(&c, &wi)| (c, wi))
            .collect();
        key.sort_unstable();
        *index.entry(key).or_insert_with(|| {
            let p = (base[corner[0]] * w[0] as f64
                + base[corner[1]] * w[1] as f64
                + base[corner[2]] * w[2] as f64)
                .normalize();
            vertices.push(Point3::from(p));
            vertices.len() - 1
        })
    };

    for f in &base_faces {
        let mut grid = vec![vec![0usize; nu + 1]; nu + 1];
        for i in 0..=nu {
            for j in 0..=(nu - i) {
                grid[i][j] = vertex_at(*f, [nu - i - j, i, j]);
            }
        }
        for i in 0..nu {
            for j in 0..(nu - i) {
                faces.push([grid[i][j], grid[i + 1][j], grid[i][j + 1]]);
                if j + 1 < nu - i {
                    faces.push([grid[i + 1][j], grid[i + 1][j + 1], grid[i][j + 1]]);
                }
            }
        }
    }
    TriangleMesh::new(vertices, faces, format!("sphere_f{nu}")).expect("valid sphere")
}

/// Icosphere with `level` rounds of 1-to-4 subdivision (level 4 has 2562 vertices).
pub fn icosphere(level: u32) -> TriangleMesh {
    let mut m = geodesic_sphere(1usize << level);
    m.set_name(format!("icosphere{level}"));
    m
}

/// Sphere with smooth random radial bumps; the bumps remove all symmetries.
pub fn bumpy_sphere(level: u32, amplitude: f64, seed: u64) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(Vector3<f64>, f64)> = (0..8)
        .map(|_| {
            let c = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            (c, rng.gen_range(0.3..1.0) * amplitude)
        })
        .collect();
    let base = icosphere(level);
    let vertices = base
        .vertices()
        .iter()
        .map(|p| {
            let r = 1.0
                + bumps
                    .iter()
                    .map(|(c, a)| a * (-(p.coords - c).norm_squared() / 0.3).exp())
                    .sum::<f64>();
            Point3::from(p.coords * r)
        })
        .collect();
    TriangleMesh::new(vertices, base.faces().to_vec(), format!("bumpy{seed}"))
        .expect("valid bumpy sphere")
}

/// Elongated asymmetric blob: an ellipsoid with a few random bumps. Built on a
/// geodesic sphere of the given frequency (`10·f² + 2` vertices).
pub fn blob_template(frequency: usize, seed: u64) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(Vector3<f64>, f64, f64)> = (0..6)
        .map(|_| {
            let c = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            (c, rng.gen_range(0.15..0.35), rng.gen_range(0.08..0.2))
        })
        .collect();
    let axes = Vector3::new(1.8, 0.7, 0.5);
    let base = geodesic_sphere(frequency);
    let vertices = base
        .vertices()
        .iter()
        .map(|p| {
            let r = 1.0
                + bumps
                    .iter()
                    .map(|(c, a, w)| a * (-(p.coords - c).norm_squared() / w).exp())
                    .sum::<f64>();
            Point3::from((p.coords * r).component_mul(&axes))
        })
        .collect();
    TriangleMesh::new(vertices, base.faces().to_vec(), format!("blob{seed}"))
        .expect("valid blob")
}

/// Bends the mesh around the y axis: the x coordinate is wrapped onto a circle
/// of the given radius, which keeps the z = 0 sheet isometric and the rest
/// nearly so for shapes thin in z.
pub fn bend(mesh: &TriangleMesh, radius: f64) -> TriangleMesh {
    let vertices = mesh
        .vertices()
        .iter()
        .map(|p| {
            let theta = p.x / radius;
            let r = radius - p.z;
            Point3::new(r * theta.sin(), p.y, radius - r * theta.cos())
        })
        .collect();
    TriangleMesh::new(vertices, mesh.faces().to_vec(), format!("{}_bent", mesh.name()))
        .expect("bending preserves validity")
}

/// Template blob and a bent copy with identical vertex order, so the ground
/// truth correspondence is the identity.
pub fn near_isometric_pair(frequency: usize, seed: u64) -> (TriangleMesh, TriangleMesh) {
    let template = blob_template(frequency, seed);
    let bent = bend(&template, 1.6);
    (template, bent)
}

/// `nx × ny` vertex grid over `[0, 1] × [0, (ny-1)/(nx-1)]` with small random
/// heights. Each quad is split along a randomly chosen diagonal.
pub fn wavy_grid(nx: usize, ny: usize, seed: u64) -> TriangleMesh {
    assert!(nx >= 2 && ny >= 2, "grid needs at least 2 × 2 vertices");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1.0 / (nx - 1) as f64;
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            vertices.push(Point3::new(i as f64 * h, j as f64 * h, rng.gen_range(-0.2..0.2) * h));
        }
    }
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            let (b, c, d) = (a + 1, a + nx + 1, a + nx);
            if rng.gen_bool(0.5) {
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            } else {
                faces.push([a, b, d]);
                faces.push([b, c, d]);
            }
        }
    }
    TriangleMesh::new(vertices, faces, format!("grid{nx}x{ny}")).expect("valid grid")
}

/// Uniformly random rotation (from a random unit quaternion).
pub fn random_rotation(seed: u64) -> nalgebra::Matrix3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = nalgebra::Quaternion::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts() {
        let g = wavy_grid(6, 5, 1);
        assert_eq!(g.num_vertices(), 30);
        assert_eq!(g.num_faces(), 40);
    }

    #[test]
    fn sphere_vertex_counts() {
        assert_eq!(icosphere(0).num_vertices(), 12);
        assert_eq!(icosphere(4).num_vertices(), 2562);
        assert_eq!(icosphere(4).num_faces(), 5120);
        assert_eq!(geodesic_sphere(10).num_vertices(), 1002);
    }

    #[test]
    fn sphere_is_closed_and_consistently_oriented() {
        let s = icosphere(2);
        // every directed edge appears exactly once, and its reverse exactly once
        let mut directed = std::collections::HashSet::new();
        for f in s.faces() {
            for e in 0..3 {
                assert!(directed.insert((f[e], f[(e + 1) % 3])));
            }
        }
        for &(a, b) in &directed {
            assert!(directed.contains(&(b, a)));
        }
        // outward orientation: normals point away from the origin
        let normals = s.vertex_normals();
        for (p, n) in s.vertices().iter().zip(&normals) {
            assert!(p.coords.dot(n) > 0.9);
        }
    }

    #[test]
    fn bend_preserves_center_sheet_lengths() {
        let (a, b) = near_isometric_pair(6, 1);
        let ga = a.edge_graph();
        let gb = b.edge_graph();
        let mut worst: f64 = 0.0;
        for (ea, eb) in ga.edges().iter().zip(gb.edges()) {
            worst = worst.max((ea.2 - eb.2).abs() / ea.2);
        }
        assert!(worst < 0.5, "edge distortion {worst}");
        assert!(((a.total_area() - b.total_area()) / a.total_area()).abs() < 0.05);
    }
}
