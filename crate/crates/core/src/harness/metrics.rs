use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::numeric::Tensor;

/// Per-electrode temporal correlations of one beat.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeCc {
    /// `None` where the true series is constant.
    pub per_electrode: Vec<Option<f64>>,
    /// Mean over the defined electrodes.
    pub mean: f64,
    pub excluded: usize,
}

impl ElectrodeCc {
    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_electrode.iter().flatten().copied()
    }
}

/// Pearson correlation along time for every electrode (row).
///
/// Electrodes whose true series has zero variance are excluded. A constant
/// prediction against a varying truth scores 0.
pub fn temporal_cc(pred: &Tensor, truth: &Tensor) -> Result<ElectrodeCc> {
    if pred.shape() != truth.shape() || truth.rank() != 2 {
        return Err(dim_err("temporal_cc", pred.shape(), truth.shape()));
    }
    if truth.cols() < 2 {
        return Err(Error::UndefinedMetric("temporal CC needs at least 2 samples".into()));
    }
    let per_electrode: Vec<Option<f64>> = (0..truth.rows())
        .map(|i| pearson(pred.row(i), truth.row(i)))
        .collect();
    let defined: Vec<f64> = per_electrode.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(
            "every electrode has a constant true series".into(),
        ));
    }
    Ok(ElectrodeCc {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        excluded: per_electrode.len() - defined.len(),
        per_electrode,
    })
}

fn pearson(p: &[f64], x: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mp, mx) = (p.iter().sum::<f64>() / n, x.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut spp) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(x) {
        let (da, db) = (a - mp, b - mx);
        sxy += da * db;
        sxx += db * db;
        spp += da * da;
    }
    if sxx == 0.0 {
        return None;
    }
    if spp == 0.0 {
        return Some(0.0);
    }
    Some((sxy / (sxx * spp).sqrt()).clamp(-1.0, 1.0))
}

/// Mean squared and mean absolute error over all entries.
pub fn mse_mae(pred: &Tensor, truth: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() {
        return Err(dim_err("mse_mae", pred.shape(), truth.shape()));
    }
    let n = truth.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in pred.data().iter().zip(truth.data()) {
        let d = a - b;
        se += d * d;
        ae += d.abs();
    }
    Ok((se / n, ae / n))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeatMetrics {
    pub heart_id: u32,
    pub pacing_site: usize,
    pub cc: f64,
    pub mse: f64,
    pub mae: f64,
}

/// Aggregate of a method over a set of beats.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub method: String,
    /// Mean over all defined (electrode, beat) pairs.
    pub temporal_cc: f64,
    /// In the units of the data (millivolts).
    pub mse: f64,
    pub mae: f64,
    /// (electrode, beat) pairs left out because the truth was constant.
    pub cc_excluded: usize,
    pub per_beat: Vec<BeatMetrics>,
    pub param_count: usize,
    pub epochs: usize,
    pub split_checksum: String,
    pub config_fingerprint: String,
    pub wall_clock_s: f64,
}

/// Accumulates per-beat metrics into a report.
#[derive(Default)]
pub(crate) struct Accumulator {
    cc_sum: f64,
    cc_n: usize,
    excluded: usize,
    se: f64,
    ae: f64,
    n: usize,
    per_beat: Vec<BeatMetrics>,
}

impl Accumulator {
    pub fn add(&mut self, pred: &Tensor, truth: &Tensor, heart_id: u32, pacing_site: usize) -> Result<()> {
        let (mse, mae) = mse_mae(pred, truth)?;
        let cc = match temporal_cc(pred, truth) {
            Ok(cc) => {
                self.cc_sum += cc.defined().sum::<f64>();
                self.cc_n += cc.per_electrode.len() - cc.excluded;
                self.excluded += cc.excluded;
                cc.mean
            }
            Err(Error::UndefinedMetric(_)) => {
                self.excluded += truth.rows();
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        self.se += mse * truth.len() as f64;
        self.ae += mae * truth.len() as f64;
        self.n += truth.len();
        self.per_beat.push(BeatMetrics {
            heart_id,
            pacing_site,
            cc,
            mse,
            mae,
        });
        Ok(())
    }

    /// `(cc, mse, mae, excluded, per_beat)`.
    pub fn finish(self) -> Result<(f64, f64, f64, usize, Vec<BeatMetrics>)> {
        if self.n == 0 {
            return Err(Error::Contract("no beats to evaluate".into()));
        }
        if self.cc_n == 0 {
            return Err(Error::UndefinedMetric("no electrode has a varying true series".into()));
        }
        Ok((
            self.cc_sum / self.cc_n as f64,
            self.se / self.n as f64,
            self.ae / self.n as f64,
            self.excluded,
            self.per_beat,
        ))
    }
}
