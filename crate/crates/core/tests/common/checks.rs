//! Acceptance checks that are cheap enough to share between the focused
//! integration tests and the acceptance run.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use ecgi_core::diffusion::{build_schedule, forward_sample, reverse_step, DiffusionConfig, NoiseSchedule};
use ecgi_core::forward_sim::{
    apply_forward, empirical_snr_db, make_dataset, split_checksum, synth_epicardial_beat, synth_transfer_matrix,
    BeatParams, DatasetConfig, TransferOperator,
};
use ecgi_core::harness::{evaluate, mse_mae, temporal_cc, Method};
use ecgi_core::inverse::{solve_beat, svd, tikhonov_solve, tsvd_solve, RegOperator, RegularizationConfig};
use ecgi_core::rng;
use ecgi_core::Tensor;

use super::random;

pub const MC_DRAWS: usize = 100_000;
pub const PROPERTY_CASES: u32 = 1000;
/// Two-sided cut for Monte Carlo z-scores, in standard errors.
pub const Z_LIMIT: f64 = 3.0;
/// Master seed of the Monte Carlo noise streams.
pub const MC_SEED: u64 = 42;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn runner(cases: u32) -> TestRunner {
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

/// `(|Δmean| / SE, |Δvar| / SE)` of `samples` against a normal law.
pub fn moment_z_scores(samples: &[f64], mean: f64, var: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = (var / n).sqrt();
    let se_var = var * (2.0 / (n - 1.0)).sqrt();
    ((m - mean).abs() / se_mean, (v - var).abs() / se_var)
}

pub fn default_schedule() -> NoiseSchedule {
    build_schedule(&DiffusionConfig::default()).unwrap()
}

/// ᾱ recurrence, monotonicity, and the closed-form forward marginal.
pub fn schedule_suite() -> Outcome {
    let s = default_schedule();
    let recurrence = s.alpha_bar(1) == s.alpha(1)
        && (2..=s.steps()).all(|t| s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t));
    let decreasing = (2..=s.steps()).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1));
    let x0 = Tensor::full(&[1, MC_DRAWS], 1.0);
    let mut worst: f64 = 0.0;
    for t in [1, 50, 100] {
        let eps = Tensor::new(
            vec![1, MC_DRAWS],
            rng::normals(&mut rng::stream(MC_SEED, &[t as u64]), MC_DRAWS),
        )
        .unwrap();
        let xt = forward_sample(&x0, t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t);
        let (zm, zv) = moment_z_scores(xt.data(), ab.sqrt(), 1.0 - ab);
        worst = worst.max(zm).max(zv);
    }
    Outcome::new(
        recurrence && decreasing && worst < Z_LIMIT,
        format!("recurrence exact={recurrence} decreasing={decreasing} worst MC deviation {worst:.2} SE"),
    )
}

/// Plugging the injected noise back in at t = 1 inverts the corruption.
pub fn reverse_identity() -> Outcome {
    let s = default_schedule();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let x0 = random(&[6, 16], seed).map(|v| 30.0 * v);
        let eps = random(&[6, 16], seed + 100);
        let z = random(&[6, 16], seed + 200);
        let x1 = forward_sample(&x0, 1, &eps, &s).unwrap();
        let back = reverse_step(&x1, 1, &eps, &s, Some(&z)).unwrap();
        worst = worst.max(back.max_abs_diff(&x0));
    }
    Outcome::new(worst < 1e-12, format!("max |x0 - reverse(x1)| = {worst:.3e}"))
}

/// Independent dense solve by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = a.row(i).to_vec();
            r.push(b[i]);
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Relative residual of the Tikhonov normal equations.
pub fn tikhonov_residual(a: &Tensor, y: &[f64], lambda: f64) -> f64 {
    let x = tikhonov_solve(a, y, lambda, None).unwrap();
    let at = a.transpose().unwrap();
    let aty = at.matvec(y).unwrap();
    let ax = a.matvec(&x).unwrap();
    let mut lhs = at.matvec(&ax).unwrap();
    lhs.iter_mut().zip(&x).for_each(|(l, xi)| *l += lambda * lambda * xi);
    diff_norm(&lhs, &aty) / norm(&aty)
}

/// Full-rank TSVD against `Aᵀ(AAᵀ)⁻¹y` from an independent elimination.
pub fn tsvd_pinv_error(a: &Tensor, y: &[f64]) -> f64 {
    let f = svd(a).unwrap();
    let x = tsvd_solve(&f, y, f.rank()).unwrap();
    let at = a.transpose().unwrap();
    let w = gauss_solve(&a.matmul(&at).unwrap(), y);
    let pinv = at.matvec(&w).unwrap();
    diff_norm(&x, &pinv) / norm(&pinv)
}

/// Noiseless recovery on a square, well-conditioned operator at λ = 1e-10.
pub fn square_recovery_error(seed: u64) -> f64 {
    let n = 10;
    let a = Tensor::from_fn2(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
        .zip_map(&random(&[n, n], seed).map(|v| 0.1 * v), "add", |p, q| p + q)
        .unwrap();
    let geom = synth_transfer_matrix(n, n, seed).unwrap();
    let op = TransferOperator { matrix: a, ..geom };
    let beat = synth_epicardial_beat(&op, 0, 32, &BeatParams::default(), 0, &mut rng::stream(seed, &[1])).unwrap();
    let rec = apply_forward(&op, &beat, f64::INFINITY, 0).unwrap();
    let est = solve_beat(&op, &rec, &RegularizationConfig::tikhonov(1e-10, RegOperator::Identity)).unwrap();
    let err: f64 = est.data().iter().zip(beat.potentials.data()).map(|(e, x)| (e - x).powi(2)).sum();
    err.sqrt() / beat.potentials.frobenius_norm()
}

pub fn classical_oracles() -> Outcome {
    let (mut res, mut pinv, mut rec) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..10u64 {
        let a = random(&[8, 12], seed);
        let y = random(&[8, 1], seed + 50).into_data();
        res = res.max(tikhonov_residual(&a, &y, 0.1));
        pinv = pinv.max(tsvd_pinv_error(&a, &y));
        rec = rec.max(square_recovery_error(seed));
    }
    Outcome::new(
        res < 1e-10 && pinv < 1e-8 && rec < 1e-6,
        format!("normal-eq residual {res:.2e}, TSVD vs pinv {pinv:.2e}, square recovery {rec:.2e}"),
    )
}

/// Injected SNR measured over one long record of ≥ 10⁵ samples.
pub fn measured_snr(requested: f64, seed: u64) -> f64 {
    let op = synth_transfer_matrix(12, 24, seed).unwrap();
    let samples = MC_DRAWS.div_ceil(12);
    let beat = synth_epicardial_beat(&op, 3, samples, &BeatParams::default(), 0, &mut rng::stream(seed, &[2])).unwrap();
    let clean = apply_forward(&op, &beat, f64::INFINITY, 0).unwrap();
    let noisy = apply_forward(&op, &beat, requested, seed).unwrap();
    empirical_snr_db(&clean.potentials, &noisy.potentials)
}

pub fn snr_contract() -> Outcome {
    let got = measured_snr(20.0, 7);
    Outcome::new((got - 20.0).abs() <= 0.2, format!("requested 20 dB, measured {got:.4} dB"))
}

fn signal(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-50.0f64..50.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

/// Pearson CC is unchanged by per-electrode positive affine maps.
pub fn cc_affine_invariance() -> std::result::Result<(), String> {
    let strat = (2usize..6, 4usize..24).prop_flat_map(|(r, c)| {
        (
            signal(r, c),
            signal(r, c),
            prop::collection::vec((0.01f64..100.0, -100.0f64..100.0), r),
            any::<bool>(),
        )
    });
    runner(PROPERTY_CASES)
        .run(&strat, |(pred, truth, maps, on_truth)| {
            let base = temporal_cc(&pred, &truth).unwrap();
            let mut moved = if on_truth { truth.clone() } else { pred.clone() };
            let cols = moved.cols();
            for (i, (a, b)) in maps.iter().enumerate() {
                for j in 0..cols {
                    moved.set(i, j, a * moved.at(i, j) + b);
                }
            }
            let after = if on_truth { temporal_cc(&pred, &moved) } else { temporal_cc(&moved, &truth) }.unwrap();
            prop_assert_eq!(base.excluded, after.excluded);
            prop_assert!((base.mean - after.mean).abs() < 1e-9, "{} vs {}", base.mean, after.mean);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Shifting the prediction by `c` gives `(mse, mae) = (c², |c|)` against
/// itself, and a common shift of both arguments changes nothing.
pub fn error_translation_covariance() -> std::result::Result<(), String> {
    let strat = (1usize..6, 1usize..24).prop_flat_map(|(r, c)| (signal(r, c), signal(r, c), -20.0f64..20.0));
    runner(PROPERTY_CASES)
        .run(&strat, |(pred, truth, c)| {
            let shifted = truth.map(|v| v + c);
            let (mse, mae) = mse_mae(&shifted, &truth).unwrap();
            prop_assert!((mse - c * c).abs() <= 1e-9 * (1.0 + c * c));
            prop_assert!((mae - c.abs()).abs() <= 1e-9 * (1.0 + c.abs()));
            let (m0, a0) = mse_mae(&pred, &truth).unwrap();
            let (m1, a1) = mse_mae(&pred.map(|v| v + c), &shifted).unwrap();
            prop_assert!((m0 - m1).abs() <= 1e-9 * (1.0 + m0));
            prop_assert!((a0 - a1).abs() <= 1e-9 * (1.0 + a0));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn tiny_dataset_config() -> impl Strategy<Value = DatasetConfig> {
    (2usize..4, 2usize..5, 3usize..7, 2usize..5, 16usize..24, any::<u64>()).prop_map(|(hearts, beats, n_h, n_b, t, seed)| {
        DatasetConfig {
            hearts,
            beats_per_heart: beats,
            pacing_sites_per_heart: 2,
            n_h,
            n_b,
            t,
            seed,
            ..DatasetConfig::default()
        }
    })
}

/// Every method evaluated on one split reports that split's checksum, a
/// regenerated split reproduces it, and any change to the data moves it.
pub fn split_checksum_invariant() -> std::result::Result<(), String> {
    let strat = (tiny_dataset_config(), any::<prop::sample::Index>(), any::<bool>());
    runner(PROPERTY_CASES)
        .run(&strat, |(cfg, which, perturb_x)| {
            let data = make_dataset(&cfg).unwrap();
            let sum = split_checksum(&data);
            prop_assert_eq!(&sum, &split_checksum(&make_dataset(&cfg).unwrap()));
            for method in [Method::Zero, Method::Oracle] {
                let rep = evaluate(&method, &data, 1, cfg.seed).unwrap();
                prop_assert_eq!(&rep.split_checksum, &sum);
            }
            let mut other = data.clone();
            let pair = &mut other.train[which.index(data.train.len())];
            let t = if perturb_x { &mut pair.beat.potentials } else { &mut pair.record.potentials };
            let k = which.index(t.len());
            t.data_mut()[k] += 1e-9;
            prop_assert_ne!(&sum, &split_checksum(&other));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn metric_invariances() -> Outcome {
    let results = [
        ("cc affine", cc_affine_invariance()),
        ("mse/mae translation", error_translation_covariance()),
        ("split checksum", split_checksum_invariant()),
    ];
    let pass = results.iter().all(|(_, r)| r.is_ok());
    let detail = results
        .iter()
        .map(|(n, r)| match r {
            Ok(()) => format!("{n}: {PROPERTY_CASES} cases ok"),
            Err(e) => format!("{n}: {e}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(pass, detail)
}
