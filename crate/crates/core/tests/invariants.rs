//! Property tests for invariants that hold for arbitrary inputs.

use std::path::Path;

use nalgebra::{DMatrix, Point3};
use proptest::prelude::*;
use specmatch::eval::{correlation, geodesic_error, nearest_rank, ErrorReport};
use specmatch::fmap::solve_fmap;
use specmatch::network::MlpParams;
use specmatch::penalties::{e1_bijectivity, e2_orthogonality, e3_laplacian_commutativity};
use specmatch::pointmap::PointMap;
use specmatch::train::{adam_step, smoothed, AdamState};
use specmatch::{compute_basis, synthetic, TriangleMesh};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn random_orthogonal(k: usize, seed: u64) -> DMatrix<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
    a.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solve_recovers_exact_maps((k1, k2, extra) in (1usize..7, 1usize..7, 0usize..6), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = k1 + extra + 1;
        let a1 = DMatrix::from_fn(k1, d, |_, _| rng.gen_range(-1.0..1.0));
        let c = DMatrix::from_fn(k2, k1, |_, _| rng.gen_range(-1.0..1.0));
        prop_assume!(a1.clone().svd(false, false).singular_values.min() > 1e-2);
        let a2 = &c * &a1;
        let got = solve_fmap(&a1, &a2).unwrap();
        prop_assert!((got - c).amax() < 1e-5);
    }

    #[test]
    fn map_energies_nonnegative(c12 in matrix(4, 5), c21 in matrix(5, 4)) {
        let l1 = [0.0, 0.5, 1.0, 2.0, 3.0];
        let l2 = [0.0, 0.4, 1.2, 2.5];
        prop_assert!(e1_bijectivity(&c12, &c21).unwrap().value >= 0.0);
        prop_assert!(e2_orthogonality(&c12, &c21).unwrap().value >= 0.0);
        prop_assert!(e3_laplacian_commutativity(&c12, &c21, &l1, &l2).unwrap().value >= 0.0);
    }

    #[test]
    fn orthogonal_inverse_pairs_have_zero_bijectivity_and_orthogonality(k in 1usize..8, seed in any::<u64>()) {
        let q = random_orthogonal(k, seed);
        let qt = q.transpose();
        prop_assert!(e1_bijectivity(&q, &qt).unwrap().value < 1e-18);
        prop_assert!(e2_orthogonality(&q, &qt).unwrap().value < 1e-18);
    }

    #[test]
    fn diagonal_maps_commute_with_equal_spectra(diag in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let k = diag.len();
        let c = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag));
        let evals: Vec<f64> = (0..k).map(|i| i as f64 * 0.7).collect();
        let e3 = e3_laplacian_commutativity(&c, &c.transpose(), &evals, &evals).unwrap().value;
        prop_assert!(e3 < 1e-20);
    }

    #[test]
    fn zero_network_is_identity(x in matrix(6, 5), layers in 1usize..5) {
        let net = MlpParams::zeros(5, layers);
        prop_assert_eq!(net.apply(&x).unwrap(), x);
    }

    #[test]
    fn network_is_row_equivariant(x in matrix(6, 4), seed in any::<u64>(), shift in 1usize..6) {
        let net = MlpParams::init(4, 3, seed).unwrap();
        let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
        let xp = DMatrix::from_fn(6, 4, |r, c| x[(perm[r], c)]);
        let y = net.apply(&x).unwrap();
        let yp = net.apply(&xp).unwrap();
        for r in 0..6 {
            prop_assert!((yp.row(r) - y.row(perm[r])).amax() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_each_parameter_by_at_most_lr(seed in any::<u64>(), lr in 1e-4f64..1e-1) {
        let mut params = MlpParams::init(3, 2, seed).unwrap();
        let before = params.to_flat();
        let grads = MlpParams::init(3, 2, seed.wrapping_add(1)).unwrap();
        let mut state = AdamState::new(&params);
        prop_assert!(adam_step(&mut params, &grads, &mut state, lr).unwrap());
        for (a, b) in params.to_flat().iter().zip(&before) {
            prop_assert!((a - b).abs() <= lr * (1.0 + 1e-9));
        }
    }

    #[test]
    fn smoothing_preserves_constants_and_bounds(values in prop::collection::vec(-10.0f64..10.0, 1..60), w in 1usize..20) {
        let s = smoothed(&values, w);
        prop_assert_eq!(s.len(), values.len());
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in &s {
            prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
        }
        let c = smoothed(&vec![3.5; values.len()], w);
        prop_assert!(c.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn nearest_rank_is_monotone_and_an_element(mut v in prop::collection::vec(0.0f64..5.0, 1..50), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = nearest_rank(&v, lo);
        let b = nearest_rank(&v, hi);
        prop_assert!(a <= b);
        prop_assert!(v.contains(&a) && v.contains(&b));
    }

    #[test]
    fn error_curve_is_monotone_and_ends_at_one(errors in prop::collection::vec(0.0f64..0.6, 1..80)) {
        let r = ErrorReport::from_errors(errors);
        prop_assert!(r.curve.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        prop_assert_eq!(r.curve.last().unwrap().1, 1.0);
        prop_assert!(r.mean <= r.max && r.percentile95 <= r.max);
    }

    #[test]
    fn correlation_is_affine_invariant(x in prop::collection::vec(-5.0f64..5.0, 3..40), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * v + i as f64).collect();
        if let Ok(r) = correlation(&x, &y) {
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r2 = correlation(&xs, &y).unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r));
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert!((correlation(&neg, &y).unwrap() + r).abs() < 1e-9);
        }
    }

    #[test]
    fn point_map_text_round_trip(entries in prop::collection::vec(0usize..100, 0..50), header in "[a-z =]{0,20}") {
        let map = PointMap::new(entries, 100).unwrap();
        let text = map.to_text(Some(&header));
        let back = PointMap::parse(&text, Path::new("mem"), Some(100)).unwrap();
        prop_assert_eq!(back, map);
    }
}

fn small_meshes() -> Vec<TriangleMesh> {
    vec![synthetic::icosphere(1), synthetic::wavy_grid(5, 4, 3), synthetic::blob_template(3, 2)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn spectrum_invariant_under_rigid_motion_and_relabeling(which in 0usize..3, seed in any::<u64>()) {
        let mesh = &small_meshes()[which];
        let n = mesh.num_vertices();
        let rot = synthetic::random_rotation(seed);
        let moved = mesh.transformed(&rot, &nalgebra::Vector3::new(0.3, -1.0, 2.0));
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left((seed % n as u64) as usize);
        let relabeled = moved.permuted(&order).unwrap();
        let k = 6;
        let a = compute_basis(mesh, k).unwrap();
        let b = compute_basis(&relabeled, k).unwrap();
        for (x, y) in a.eigenvalues().iter().zip(b.eigenvalues()) {
            prop_assert!((x - y).abs() <= 1e-8 * x.abs().max(1.0), "{} vs {}", x, y);
        }
    }

    #[test]
    fn eigenvalues_scale_inversely_with_area(which in 0usize..3, s in 0.2f64..5.0) {
        let mesh = &small_meshes()[which];
        let a = compute_basis(mesh, 5).unwrap();
        let b = compute_basis(&mesh.scaled(s), 5).unwrap();
        for (x, y) in a.eigenvalues().iter().zip(b.eigenvalues()) {
            prop_assert!((x - y * s * s).abs() <= 1e-7 * x.abs().max(1e-6));
        }
    }

    #[test]
    fn geodesic_error_zero_iff_maps_agree(which in 0usize..3, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mesh = &small_meshes()[which];
        let n = mesh.num_vertices();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gt = PointMap::new((0..n).map(|_| rng.gen_range(0..n)).collect(), n).unwrap();
        prop_assert_eq!(geodesic_error(&gt, &gt, mesh).unwrap().max, 0.0);
        let mut other = gt.target_to_source.clone();
        let i = rng.gen_range(0..n);
        other[i] = (other[i] + 1) % n;
        let r = geodesic_error(&PointMap::new(other, n).unwrap(), &gt, mesh).unwrap();
        prop_assert!(r.max > 0.0);
        prop_assert!(r.errors.iter().filter(|e| **e > 0.0).count() == 1);
    }
}

#[test]
fn triangle_mesh_rejects_out_of_range_faces() {
    let v = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
    assert!(TriangleMesh::new(v, vec![[0, 1, 3]], "bad").is_err());
}
