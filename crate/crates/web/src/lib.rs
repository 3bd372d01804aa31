//! WebAssembly bindings for the browser demo. Each exported call wraps a
//! plain Rust function so the logic is testable off the browser.

use ecgi_core::diffusion::{build_schedule, DiffusionConfig, ScheduleKind};
use ecgi_core::forward_sim::{apply_forward, synth_epicardial_beat, synth_transfer_matrix, BeatParams, TransferOperator};
use ecgi_core::harness::{mse_mae, temporal_cc};
use ecgi_core::inverse::{solve_beat, RegOperator, RegularizationConfig};
use ecgi_core::{rng, Tensor};
use wasm_bindgen::prelude::*;

const N_H: usize = 24;
const N_B: usize = 12;
const SAMPLES: usize = 64;

/// One simulated beat: heart potentials and their torso projection.
#[wasm_bindgen]
pub struct Scene {
    op: TransferOperator,
    heart: Tensor,
    clean: Tensor,
    noisy: Tensor,
    record: ecgi_core::forward_sim::BodySurfaceRecord,
}

/// Estimate of the heart potentials with its scores against the truth.
#[wasm_bindgen]
pub struct Reconstruction {
    estimate: Vec<f64>,
    cc: f64,
    mse: f64,
}

impl Scene {
    pub fn simulate(seed: u32, pacing_site: usize, snr_db: f64) -> Result<Self, String> {
        let op = synth_transfer_matrix(N_B, N_H, seed as u64).map_err(|e| e.to_string())?;
        let mut r = rng::stream(seed as u64, &[1]);
        let beat = synth_epicardial_beat(&op, pacing_site, SAMPLES, &BeatParams::default(), 0, &mut r)
            .map_err(|e| e.to_string())?;
        let clean = apply_forward(&op, &beat, f64::INFINITY, 0).map_err(|e| e.to_string())?;
        let snr = if snr_db.is_finite() { snr_db } else { f64::INFINITY };
        let record = apply_forward(&op, &beat, snr, rng::derive_seed(seed as u64, &[2])).map_err(|e| e.to_string())?;
        Ok(Self {
            op,
            heart: beat.potentials,
            clean: clean.potentials,
            noisy: record.potentials.clone(),
            record,
        })
    }

    pub fn invert(&self, method: &str, lambda: f64, rank: usize) -> Result<Reconstruction, String> {
        let cfg = match method {
            "tikhonov0" => RegularizationConfig::tikhonov(lambda, RegOperator::Identity),
            "tikhonov1" => RegularizationConfig::tikhonov(lambda, RegOperator::FirstDifference),
            "tsvd" => RegularizationConfig::tsvd(rank),
            other => return Err(format!("unknown method {other}")),
        };
        let est = solve_beat(&self.op, &self.record, &cfg).map_err(|e| e.to_string())?;
        let cc = temporal_cc(&est, &self.heart).map_err(|e| e.to_string())?.mean;
        let (mse, _) = mse_mae(&est, &self.heart).map_err(|e| e.to_string())?;
        Ok(Reconstruction {
            estimate: est.into_data(),
            cc,
            mse,
        })
    }
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, pacing_site: u32, snr_db: f64) -> Result<Scene, JsError> {
        Self::simulate(seed, pacing_site as usize, snr_db).map_err(|e| JsError::new(&e))
    }

    pub fn n_h(&self) -> usize {
        N_H
    }

    pub fn n_b(&self) -> usize {
        N_B
    }

    pub fn samples(&self) -> usize {
        SAMPLES
    }

    /// `n_h × T`, row-major, millivolts.
    pub fn heart(&self) -> Vec<f64> {
        self.heart.data().to_vec()
    }

    /// `n_b × T` noiseless torso potentials.
    pub fn torso_clean(&self) -> Vec<f64> {
        self.clean.data().to_vec()
    }

    /// `n_b × T` torso potentials with noise at the requested SNR.
    pub fn torso_noisy(&self) -> Vec<f64> {
        self.noisy.data().to_vec()
    }

    pub fn condition_number(&self) -> f64 {
        self.op.condition_number().unwrap_or(f64::NAN)
    }

    /// `method` is `tikhonov0`, `tikhonov1` or `tsvd`; `rank` is used by TSVD only.
    pub fn reconstruct(&self, method: &str, lambda: f64, rank: u32) -> Result<Reconstruction, JsError> {
        self.invert(method, lambda, rank as usize).map_err(|e| JsError::new(&e))
    }
}

#[wasm_bindgen]
impl Reconstruction {
    pub fn estimate(&self) -> Vec<f64> {
        self.estimate.clone()
    }

    pub fn cc(&self) -> f64 {
        self.cc
    }

    pub fn mse(&self) -> f64 {
        self.mse
    }
}

/// `[β_1..β_T, ᾱ_1..ᾱ_T]` of a noise schedule.
pub fn curves(steps: usize, beta_min: f64, beta_max: f64, sqrt_linear: bool) -> Result<Vec<f64>, String> {
    let cfg = DiffusionConfig {
        steps,
        beta_min,
        beta_max,
        schedule: if sqrt_linear { ScheduleKind::SqrtLinear } else { ScheduleKind::Linear },
        ..DiffusionConfig::default()
    };
    let s = build_schedule(&cfg).map_err(|e| e.to_string())?;
    Ok((1..=steps).map(|t| s.beta(t)).chain((1..=steps).map(|t| s.alpha_bar(t))).collect())
}

#[wasm_bindgen]
pub fn schedule_curves(steps: u32, beta_min: f64, beta_max: f64, sqrt_linear: bool) -> Result<Vec<f64>, JsError> {
    curves(steps as usize, beta_min, beta_max, sqrt_linear).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_shapes() {
        let s = Scene::simulate(3, 5, 20.0).unwrap();
        assert_eq!(s.heart().len(), N_H * SAMPLES);
        assert_eq!(s.torso_noisy().len(), N_B * SAMPLES);
        assert_ne!(s.torso_clean(), s.torso_noisy());
        assert!(s.condition_number() > 1.0);
    }

    #[test]
    fn infinite_snr_is_noiseless() {
        let s = Scene::simulate(3, 5, f64::INFINITY).unwrap();
        assert_eq!(s.torso_clean(), s.torso_noisy());
    }

    #[test]
    fn reconstruction_methods() {
        let s = Scene::simulate(1, 0, 20.0).unwrap();
        for m in ["tikhonov0", "tikhonov1", "tsvd"] {
            let r = s.invert(m, 0.1, 6).unwrap();
            assert_eq!(r.estimate().len(), N_H * SAMPLES);
            assert!(r.cc() > -1.0 && r.cc() <= 1.0 && r.mse() >= 0.0);
        }
        assert!(s.invert("nope", 0.1, 1).is_err());
        assert!(s.invert("tsvd", 0.1, 99).is_err());
    }

    #[test]
    fn schedule_curve_layout() {
        let c = curves(100, 1e-4, 0.02, true).unwrap();
        assert_eq!(c.len(), 200);
        assert_eq!(c[0], 1e-4);
        assert!((c[99] - 0.02).abs() < 1e-15);
        assert_eq!(c[100], 1.0 - 1e-4);
        assert!(curves(0, 1e-4, 0.02, true).is_err());
    }
}
