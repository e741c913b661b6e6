//! Finite-difference checks of every analytic gradient.

mod common;

use common::{gaussian, numeric_grad, params_numeric_grad, rel_err, vec_rel_err};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use specmatch::fmap::{solve_fmap, solve_fmap_backward};
use specmatch::penalties::{
    e1_bijectivity, e2_orthogonality, e3_laplacian_commutativity, e3_matrix_form,
    e4_descriptor_commutativity, mult_operator, mult_operator_grad, mult_operator_restricted,
    total_energy, MapPenalty, MultOperator, PenaltyWeights,
};
use specmatch::spectral::complete_basis;
use specmatch::synthetic;

fn check_map_penalty(
    name: &str,
    seed: u64,
    tol: f64,
    eval: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> MapPenalty,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k1, k2) = (5, 4);
    let c12 = gaussian(k2, k1, &mut rng) * 0.5;
    let c21 = gaussian(k1, k2, &mut rng) * 0.5;
    let p = eval(&c12, &c21);
    let n12 = numeric_grad(&c12, 1e-6, |x| eval(x, &c21).value);
    let n21 = numeric_grad(&c21, 1e-6, |x| eval(&c12, x).value);
    let (e12, e21) = (rel_err(&p.grad_c12, &n12), rel_err(&p.grad_c21, &n21));
    assert!(e12 < tol && e21 < tol, "{name}: relative errors {e12:.2e} {e21:.2e}");
}

#[test]
fn bijectivity_gradient() {
    for seed in 0..5 {
        check_map_penalty("E1", seed, 1e-6, |a, b| e1_bijectivity(a, b).unwrap());
    }
}

#[test]
fn orthogonality_gradient() {
    for seed in 0..5 {
        check_map_penalty("E2", seed, 1e-6, |a, b| e2_orthogonality(a, b).unwrap());
    }
}

#[test]
fn laplacian_gradient() {
    let l1 = [0.0, 0.4, 1.1, 2.5, 3.0];
    let l2 = [0.0, 0.5, 1.0, 2.2];
    for seed in 0..5 {
        check_map_penalty("E3", seed, 1e-6, |a, b| {
            e3_laplacian_commutativity(a, b, &l1, &l2).unwrap()
        });
    }
}

#[test]
fn laplacian_two_implementations_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..20 {
        let c12 = gaussian(6, 7, &mut rng);
        let c21 = gaussian(7, 6, &mut rng);
        let l1: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..10.0)).collect();
        let l2: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..10.0)).collect();
        let a = e3_laplacian_commutativity(&c12, &c21, &l1, &l2).unwrap().value;
        let b = e3_matrix_form(&c12, &c21, &l1, &l2);
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}

fn random_ops(k: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<MultOperator> {
    (0..count)
        .map(|_| {
            let a = gaussian(k, k, rng);
            MultOperator((&a + a.transpose()) * 0.5)
        })
        .collect()
}

#[test]
fn descriptor_gradient_wrt_maps_and_operators() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k1, k2) = (5, 4);
    let c12 = gaussian(k2, k1, &mut rng) * 0.5;
    let c21 = gaussian(k1, k2, &mut rng) * 0.5;
    let ops1 = random_ops(k1, 3, &mut rng);
    let ops2 = random_ops(k2, 3, &mut rng);
    let p = e4_descriptor_commutativity(&c12, &c21, &ops1, &ops2).unwrap();

    let n12 = numeric_grad(&c12, 1e-6, |x| {
        e4_descriptor_commutativity(x, &c21, &ops1, &ops2).unwrap().value
    });
    assert!(rel_err(&p.grad_c12, &n12) < 1e-6);
    let n21 = numeric_grad(&c21, 1e-6, |x| {
        e4_descriptor_commutativity(&c12, x, &ops1, &ops2).unwrap().value
    });
    assert!(rel_err(&p.grad_c21, &n21) < 1e-6);

    for i in 0..3 {
        let n = numeric_grad(&ops1[i].0, 1e-6, |x| {
            let mut o = ops1.clone();
            o[i] = MultOperator(x.clone());
            e4_descriptor_commutativity(&c12, &c21, &o, &ops2).unwrap().value
        });
        assert!(rel_err(&p.grad_ops1[i], &n) < 1e-6);
        let n = numeric_grad(&ops2[i].0, 1e-6, |x| {
            let mut o = ops2.clone();
            o[i] = MultOperator(x.clone());
            e4_descriptor_commutativity(&c12, &c21, &ops1, &o).unwrap().value
        });
        assert!(rel_err(&p.grad_ops2[i], &n) < 1e-6);
    }
}

#[test]
fn descriptor_gradient_wrt_raw_descriptor_values() {
    let mesh = synthetic::icosphere(1);
    let basis = specmatch::compute_basis(&mesh, 8).unwrap();
    let samples: Vec<usize> = (0..mesh.num_vertices()).step_by(2).collect();
    let restricted = basis.restricted(&samples).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = samples.len();
    let f = DMatrix::from_fn(s, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let g_op = MultOperator(DMatrix::identity(8, 8));
    let c12 = gaussian(8, 8, &mut rng) * 0.3;
    let c21 = gaussian(8, 8, &mut rng) * 0.3;

    let energy = |f: &DMatrix<f64>| {
        let op = mult_operator_restricted(&restricted.rows, &restricted.pinv, f.as_slice()).unwrap();
        e4_descriptor_commutativity(&c12, &c21, &[op], std::slice::from_ref(&g_op))
            .unwrap()
            .value
    };
    let op = mult_operator_restricted(&restricted.rows, &restricted.pinv, f.as_slice()).unwrap();
    let p = e4_descriptor_commutativity(&c12, &c21, &[op], std::slice::from_ref(&g_op)).unwrap();
    let analytic = mult_operator_grad(&restricted.rows, &restricted.pinv, &p.grad_ops1[0]);
    let analytic = DMatrix::from_column_slice(s, 1, &analytic);
    let numeric = numeric_grad(&f, 1e-6, energy);
    let err = rel_err(&analytic, &numeric);
    assert!(err < 1e-5, "relative error {err:.2e}");
}

#[test]
fn total_energy_gradient_and_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k1, k2) = (4, 4);
    let c12 = gaussian(k2, k1, &mut rng) * 0.4;
    let c21 = gaussian(k1, k2, &mut rng) * 0.4;
    let ops1 = random_ops(k1, 2, &mut rng);
    let ops2 = random_ops(k2, 2, &mut rng);
    let l = [0.0, 1.0, 2.0, 3.5];
    let w = PenaltyWeights::new(2.0, 3.0, 0.5, 7.0).unwrap();
    let t = total_energy(&c12, &c21, &l, &l, &ops1, &ops2, &w).unwrap();
    let expect = 2.0 * t.components[0] + 3.0 * t.components[1] + 0.5 * t.components[2] + 7.0 * t.components[3];
    assert!((t.value - expect).abs() < 1e-10 * expect);
    let n = numeric_grad(&c12, 1e-6, |x| {
        total_energy(x, &c21, &l, &l, &ops1, &ops2, &w).unwrap().value
    });
    assert!(rel_err(&t.grad_c12, &n) < 1e-6);
}

#[test]
fn penalties_symmetric_under_pair_swap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c12 = gaussian(4, 5, &mut rng);
    let c21 = gaussian(5, 4, &mut rng);
    let l1 = [0.0, 0.4, 1.1, 2.5, 3.0];
    let l2 = [0.0, 0.5, 1.0, 2.2];
    let ops1 = random_ops(5, 2, &mut rng);
    let ops2 = random_ops(4, 2, &mut rng);
    let w = PenaltyWeights::default();
    let a = total_energy(&c12, &c21, &l1, &l2, &ops1, &ops2, &w).unwrap();
    let b = total_energy(&c21, &c12, &l2, &l1, &ops2, &ops1, &w).unwrap();
    for i in 0..4 {
        assert!((a.components[i] - b.components[i]).abs() <= 1e-10 * a.components[i].abs().max(1.0));
    }
}

#[test]
fn constant_function_gives_identity_operator() {
    let mesh = synthetic::icosphere(2);
    let basis = specmatch::compute_basis(&mesh, 10).unwrap();
    let op = mult_operator(&basis, &vec![1.0; mesh.num_vertices()]).unwrap();
    assert!((op.0 - DMatrix::<f64>::identity(10, 10)).amax() < 1e-9);
}

#[test]
fn complete_basis_operator_spectrum_is_function_values() {
    let mesh = synthetic::icosphere(1);
    let basis = complete_basis(&mesh).unwrap();
    let n = mesh.num_vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let op = mult_operator(&basis, &f).unwrap();
    let sym = (&op.0 + op.0.transpose()) * 0.5;
    let mut eig: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut sorted = f.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (a, b) in eig.iter().zip(&sorted) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn fmap_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for instance in 0..20 {
        let k1 = rng.gen_range(2..7);
        let k2 = rng.gen_range(2..7);
        let d = rng.gen_range(k1..k1 + 8);
        let a1 = gaussian(k1, d, &mut rng);
        let a2 = gaussian(k2, d, &mut rng);
        let weight = gaussian(k2, k1, &mut rng);
        // E(C) = <W, C> + ‖C‖²/2
        let energy = |a1: &DMatrix<f64>, a2: &DMatrix<f64>| {
            let c = solve_fmap(a1, a2).unwrap();
            weight.dot(&c) + 0.5 * c.norm_squared()
        };
        let c = solve_fmap(&a1, &a2).unwrap();
        let grad_c = &weight + &c;
        let (g1, g2) = solve_fmap_backward(&a1, &a2, &c, &grad_c).unwrap();
        let n1 = numeric_grad(&a1, 1e-6, |x| energy(x, &a2));
        let n2 = numeric_grad(&a2, 1e-6, |x| energy(&a1, x));
        let (e1, e2) = (rel_err(&g1, &n1), rel_err(&g2, &n2));
        assert!(e1 < 1e-4 && e2 < 1e-4, "instance {instance}: {e1:.2e} {e2:.2e}");
    }
}

#[test]
fn network_backward_matches_finite_differences() {
    use specmatch::network::MlpParams;
    for seed in 0..5 {
        let net = MlpParams::init(6, 7, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = gaussian(20, 6, &mut rng);
        // loss = sum of outputs
        let (_, cache) = net.forward(&x).unwrap();
        let (gp, gx) = net.backward(&cache, &DMatrix::from_element(20, 6, 1.0)).unwrap();
        let num = params_numeric_grad(&net, 1e-6, |p| p.apply(&x).unwrap().sum());
        let err = vec_rel_err(&gp.to_flat(), &num);
        assert!(err < 1e-5, "params: {err:.2e}");
        let nx = numeric_grad(&x, 1e-6, |y| net.apply(y).unwrap().sum());
        assert!(rel_err(&gx, &nx) < 1e-5);
    }
}

#[test]
fn end_to_end_gradient_through_maps_and_network() {
    use specmatch::network::MlpParams;
    use specmatch::train::{evaluate_pair, PairSample, ShapeData};
    let mesh1 = synthetic::wavy_grid(6, 5, 1);
    let mesh2 = synthetic::wavy_grid(6, 5, 2);
    let k = 5;
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s1 = ShapeData::new("a", specmatch::compute_basis(&mesh1, k).unwrap(), gaussian(30, d, &mut rng)).unwrap();
    let s2 = ShapeData::new("b", specmatch::compute_basis(&mesh2, k).unwrap(), gaussian(30, d, &mut rng)).unwrap();
    let sample = PairSample {
        points1: (0..30).filter(|v| v % 7 != 3).collect(),
        points2: (0..30).filter(|v| v % 5 != 1).collect(),
        columns: vec![1, 4],
    };
    let weights = PenaltyWeights::default();
    let net = MlpParams::init(d, 1, 4).unwrap();
    let eval = evaluate_pair(&net, &s1, &s2, &sample, k, &weights, true).unwrap();
    let analytic = eval.grads.unwrap().to_flat();
    let num = params_numeric_grad(&net, 1e-6, |p| {
        evaluate_pair(p, &s1, &s2, &sample, k, &weights, false).unwrap().loss
    });
    let err = vec_rel_err(&analytic, &num);
    assert!(err < 1e-5, "relative error {err:.2e}");
}
