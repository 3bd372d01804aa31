mod common;

use common::checks;
use common::random;
use ecgi_core::forward_sim::{apply_forward, make_dataset, synth_epicardial_beat, synth_transfer_matrix, BeatParams, DatasetConfig};
use ecgi_core::inverse::{
    first_difference_operator, graph_roughness, select_lambda, solve_beat, svd, tikhonov_solve, tsvd_solve, RegOperator,
    RegularizationConfig, GRAPH_NEIGHBOURS, LAMBDA_GRID,
};
use ecgi_core::{rng, Tensor};
use proptest::prelude::*;

/// Validation-selected λ on the default desk dataset, zero-order and
/// first-order Γ.
const DESK_LAMBDA: [f64; 2] = [0.1, 0.1];

#[test]
fn classical_oracles() {
    let c = checks::classical_oracles();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn svd_of_random_wide_matrix() {
    for seed in 0..5 {
        let a = random(&[12, 24], seed);
        let f = svd(&a).unwrap();
        let fro = f.reconstruct().zip_map(&a, "d", |p, q| p - q).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(fro < 1e-10, "{fro:e}");
        let utu = f.u.transpose().unwrap().matmul(&f.u).unwrap();
        let vtv = f.v.transpose().unwrap().matmul(&f.v).unwrap();
        assert!(utu.max_abs_diff(&Tensor::identity(f.rank())) < 1e-8);
        assert!(vtv.max_abs_diff(&Tensor::identity(f.rank())) < 1e-8);
        assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn tsvd_residual_is_nested() {
    let op = synth_transfer_matrix(12, 24, 5).unwrap();
    let beat = synth_epicardial_beat(&op, 4, 32, &BeatParams::default(), 0, &mut rng::stream(5, &[])).unwrap();
    let y = apply_forward(&op, &beat, f64::INFINITY, 0).unwrap().potentials;
    let f = svd(&op.matrix).unwrap();
    let col = y.column(10);
    let mut last = f64::INFINITY;
    for k in 1..=f.rank() {
        let x = tsvd_solve(&f, &col, k).unwrap();
        let r: f64 = op.matrix.matvec(&x).unwrap().iter().zip(&col).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(r <= last * (1.0 + 1e-9) + 1e-20, "k={k}: {r} > {last}");
        last = r;
    }
}

#[test]
fn graph_penalty_gives_smoother_estimates() {
    let op = synth_transfer_matrix(12, 24, 9).unwrap();
    let beat = synth_epicardial_beat(&op, 2, 64, &BeatParams::default(), 0, &mut rng::stream(9, &[])).unwrap();
    let rec = apply_forward(&op, &beat, 20.0, 9).unwrap();
    for lambda in LAMBDA_GRID {
        let x0 = solve_beat(&op, &rec, &RegularizationConfig::tikhonov(lambda, RegOperator::Identity)).unwrap();
        let x1 = solve_beat(&op, &rec, &RegularizationConfig::tikhonov(lambda, RegOperator::FirstDifference)).unwrap();
        assert!(
            graph_roughness(&x1, &op.heart_positions) < graph_roughness(&x0, &op.heart_positions),
            "lambda {lambda}"
        );
    }
}

#[test]
fn gamma_is_a_graph_incidence_matrix() {
    let op = synth_transfer_matrix(12, 24, 1).unwrap();
    let g = first_difference_operator(&op.heart_positions, GRAPH_NEIGHBOURS);
    assert_eq!(g.cols(), 24);
    assert!(g.rows() >= 24 * GRAPH_NEIGHBOURS / 2);
    for i in 0..g.rows() {
        let nz: Vec<f64> = g.row(i).iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nz.len(), 2);
        assert_eq!(nz.iter().sum::<f64>(), 0.0);
    }
}

#[test]
fn desk_lambda_is_pinned() {
    let data = make_dataset(&DatasetConfig::default()).unwrap();
    let op_of = |id: u32| data.operator(id).cloned();
    let l0 = select_lambda(&data.validation, op_of, RegOperator::Identity, &LAMBDA_GRID).unwrap().0;
    let l1 = select_lambda(&data.validation, op_of, RegOperator::FirstDifference, &LAMBDA_GRID).unwrap().0;
    assert_eq!([l0, l1], DESK_LAMBDA);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tikhonov_is_scale_covariant(seed in any::<u64>(), c in 0.05f64..20.0, lambda in 0.01f64..1.0) {
        let a = random(&[8, 12], seed);
        let y = random(&[8, 1], seed ^ 1).into_data();
        let x = tikhonov_solve(&a, &y, lambda, None).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| c * v).collect();
        let xs = tikhonov_solve(&a.map(|v| c * v), &ys, c * lambda, None).unwrap();
        let err = x.iter().zip(&xs).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn tikhonov_satisfies_normal_equations(seed in any::<u64>(), lambda in 1e-3f64..10.0) {
        let a = random(&[8, 12], seed);
        let y = random(&[8, 1], seed ^ 2).into_data();
        prop_assert!(checks::tikhonov_residual(&a, &y, lambda) < 1e-10);
    }
}
