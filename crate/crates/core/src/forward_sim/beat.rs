use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::geometry::{geodesic, TransferOperator};
use crate::error::{dim_err, Error, Result};
use crate::numeric::Tensor;
use crate::rng::{self, Rng};

/// Shape of the action-potential template and the conduction model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeatParams {
    /// Plateau amplitude in millivolts.
    pub amplitude: f64,
    /// Samples from rest to full amplitude.
    pub upstroke: usize,
    /// Plateau length in samples.
    pub plateau: usize,
    /// Repolarization time constant in samples.
    pub repolarization_tau: f64,
    /// Conduction slowness: samples of delay per unit of geodesic distance.
    pub slowness: f64,
    /// Relative standard deviation of the per-node amplitude jitter.
    pub amplitude_jitter: f64,
}

impl Default for BeatParams {
    fn default() -> Self {
        Self {
            amplitude: 30.0,
            upstroke: 2,
            plateau: 14,
            repolarization_tau: 6.0,
            slowness: 8.0,
            amplitude_jitter: 0.05,
        }
    }
}

impl BeatParams {
    /// Template value `s` samples after activation (zero before it).
    pub fn template(&self, s: isize) -> f64 {
        if s < 0 {
            return 0.0;
        }
        let s = s as usize;
        let up = self.upstroke.max(1);
        if s < up {
            self.amplitude * (s + 1) as f64 / up as f64
        } else if s < up + self.plateau {
            self.amplitude
        } else {
            let since = (s - up - self.plateau) as f64;
            self.amplitude * (-since / self.repolarization_tau).exp()
        }
    }

    pub fn delay(&self, distance: f64) -> usize {
        (self.slowness * distance).round() as usize
    }
}

/// Heart-surface potentials for one paced beat.
#[derive(Clone, Debug, PartialEq)]
pub struct EpicardialBeat {
    /// `n_h × T` potentials in millivolts.
    pub potentials: Tensor,
    pub pacing_site: usize,
    pub heart_id: u32,
    /// Set when some node's activation delay reached past the window.
    pub truncated: bool,
}

/// Torso-surface observation of a beat.
#[derive(Clone, Debug, PartialEq)]
pub struct BodySurfaceRecord {
    /// `n_b × T` potentials in millivolts.
    pub potentials: Tensor,
    pub snr_db: f64,
    pub noise_seed: u64,
}

pub const MIN_BEAT_SAMPLES: usize = 16;

/// Template-plus-delay beat: node `j` activates `round(slowness·d(j))`
/// samples after the pacing site, where `d` is the geodesic distance.
pub fn synth_epicardial_beat(
    geom: &TransferOperator,
    pacing_site: usize,
    samples: usize,
    params: &BeatParams,
    heart_id: u32,
    rng: &mut Rng,
) -> Result<EpicardialBeat> {
    let n_h = geom.n_h();
    if pacing_site >= n_h {
        return Err(Error::Contract(format!(
            "pacing site {pacing_site} out of range for {n_h} heart nodes"
        )));
    }
    if samples < MIN_BEAT_SAMPLES {
        return Err(Error::Contract(format!(
            "beats need at least {MIN_BEAT_SAMPLES} samples, got {samples}"
        )));
    }
    let origin = geom.heart_positions[pacing_site];
    let mut x = Tensor::zeros(&[n_h, samples]);
    let mut truncated = false;
    for (j, p) in geom.heart_positions.iter().enumerate() {
        let delay = params.delay(geodesic(&origin, p));
        truncated |= delay >= samples;
        let gain = 1.0 + params.amplitude_jitter * rng::normal(rng);
        for t in 0..samples {
            x.set(j, t, gain * params.template(t as isize - delay as isize));
        }
    }
    Ok(EpicardialBeat {
        potentials: x,
        pacing_site,
        heart_id,
        truncated,
    })
}

/// First sample at which each node leaves rest, `None` if it never does.
pub fn activation_times(potentials: &Tensor) -> Vec<Option<usize>> {
    (0..potentials.rows())
        .map(|i| potentials.row(i).iter().position(|v| *v != 0.0))
        .collect()
}

/// `y = A·x₀ + η` with white Gaussian noise scaled to the requested SNR,
/// referenced to the mean power of the clean signal over all channels.
/// `snr_db = +∞` yields the noiseless projection.
pub fn apply_forward(
    op: &TransferOperator,
    beat: &EpicardialBeat,
    snr_db: f64,
    noise_seed: u64,
) -> Result<BodySurfaceRecord> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Contract(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    if op.n_h() != beat.potentials.rows() {
        return Err(dim_err("apply_forward", op.matrix.shape(), beat.potentials.shape()));
    }
    let clean = op.matrix.matmul(&beat.potentials)?;
    let y = if snr_db == f64::INFINITY {
        clean
    } else {
        let sigma = noise_std(&clean, snr_db);
        let mut r = rng::stream(noise_seed, &[]);
        let mut y = clean;
        for v in y.data_mut() {
            *v += sigma * rng::normal(&mut r);
        }
        y
    };
    y.ensure_finite("apply_forward")?;
    Ok(BodySurfaceRecord {
        potentials: y,
        snr_db,
        noise_seed,
    })
}

pub fn noise_std(clean: &Tensor, snr_db: f64) -> f64 {
    let power = clean.data().iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// `10·log10(P_clean / P_noise)` with the noise taken as `noisy − clean`.
pub fn empirical_snr_db(clean: &Tensor, noisy: &Tensor) -> f64 {
    let p_clean: f64 = clean.data().iter().map(|v| v * v).sum();
    let p_noise: f64 = clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(c, n)| (n - c).powi(2))
        .sum();
    10.0 * (p_clean / p_noise).log10()
}

/// Per-beat variation of the heart-level parameters.
pub(crate) fn jitter_params(base: &BeatParams, rng: &mut Rng) -> BeatParams {
    let mut p = base.clone();
    p.slowness *= rng.random_range(0.95..1.05);
    let plateau = p.plateau as i64 + rng.random_range(-2..=2);
    p.plateau = plateau.max(1) as usize;
    p
}
