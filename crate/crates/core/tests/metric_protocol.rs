mod common;

use common::checks;
use common::random;
use ecgi_core::forward_sim::{make_dataset, split_checksum, DatasetConfig};
use ecgi_core::harness::{evaluate, temporal_cc, Method};
use ecgi_core::{rng, Tensor};

#[test]
fn cc_is_affine_invariant() {
    checks::cc_affine_invariance().unwrap();
}

#[test]
fn errors_are_translation_covariant() {
    checks::error_translation_covariance().unwrap();
}

#[test]
fn split_checksum_is_shared_and_sensitive() {
    checks::split_checksum_invariant().unwrap();
}

#[test]
fn ground_truth_scores_perfectly() {
    let data = make_dataset(&DatasetConfig::default()).unwrap();
    let rep = evaluate(&Method::Oracle, &data, 1, 0).unwrap();
    assert_eq!((rep.temporal_cc, rep.mse, rep.mae), (1.0, 0.0, 0.0));
    assert_eq!(rep.per_beat.len(), data.test.len());
}

#[test]
fn zero_predictor_mse_is_mean_signal_power() {
    let data = make_dataset(&DatasetConfig::default()).unwrap();
    let rep = evaluate(&Method::Zero, &data, 1, 0).unwrap();
    // mean(x²) and mean|x| straight from the test beats
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
    for p in &data.test {
        for v in p.beat.potentials.data() {
            sq += v * v;
            abs += v.abs();
            n += 1;
        }
    }
    assert!((rep.mse - sq / n as f64).abs() < 1e-9 * rep.mse);
    assert!((rep.mae - abs / n as f64).abs() < 1e-9 * rep.mae);
    // a constant prediction carries no temporal correlation
    assert_eq!(rep.temporal_cc, 0.0);
    assert_eq!(rep.split_checksum, split_checksum(&data));
}

/// Adding more noise to a prediction never raises its expected CC; checked
/// with paired draws and a 3-standard-error slack.
#[test]
fn noisier_predictions_correlate_less() {
    let truth = random(&[6, 64], 1).map(|v| v * 10.0);
    let sigmas = [0.0, 2.0, 5.0, 10.0, 20.0];
    let draws = 400;
    let mut r = rng::stream(3, &[]);
    let mut cc = vec![Vec::with_capacity(draws); sigmas.len()];
    for _ in 0..draws {
        let base = rng::normals(&mut r, truth.len());
        for (i, s) in sigmas.iter().enumerate() {
            let pred = Tensor::new(
                truth.shape().to_vec(),
                truth.data().iter().zip(&base).map(|(x, e)| x + s * e).collect(),
            )
            .unwrap();
            cc[i].push(temporal_cc(&pred, &truth).unwrap().mean);
        }
    }
    for i in 1..sigmas.len() {
        let d: Vec<f64> = cc[i].iter().zip(&cc[i - 1]).map(|(a, b)| a - b).collect();
        let m = d.iter().sum::<f64>() / draws as f64;
        let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
        assert!(m <= 3.0 * sd / (draws as f64).sqrt(), "sigma {} -> {}: {m}", sigmas[i - 1], sigmas[i]);
    }
}
