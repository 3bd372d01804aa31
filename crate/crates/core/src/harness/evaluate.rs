use std::fmt::Write as _;
use std::time::Instant;

use super::config::{ExperimentConfig, ModelKind};
use super::metrics::{temporal_cc, mse_mae, Accumulator, MetricsReport};
use super::model::{Prediction, TrainedModel};
use super::train::train;
use crate::error::{Error, Result};
use crate::forward_sim::{split_checksum, DatasetSplit, Pair};
use crate::inverse::{
    select_lambda, solve_beat, svd, RegOperator, RegularizationConfig, LAMBDA_GRID,
};
use crate::numeric::Tensor;

/// What produces the predictions being scored.
pub enum Method<'a> {
    Trained(&'a TrainedModel),
    /// A classical solver with the transfer operators of `data`.
    Classical {
        kind: ModelKind,
        cfg: RegularizationConfig,
        data: &'a DatasetSplit,
    },
    /// Predicts 0 mV everywhere.
    Zero,
    /// Predicts the ground truth, for protocol checks.
    Oracle,
}

impl Method<'_> {
    fn name(&self) -> String {
        match self {
            Self::Trained(m) => m.spec.kind.name().to_owned(),
            Self::Classical { kind, .. } => kind.name().to_owned(),
            Self::Zero => "zero".to_owned(),
            Self::Oracle => "ground_truth".to_owned(),
        }
    }

    /// Predictions in millivolts, beat `i` sampled on stream `i`.
    pub fn predict(&self, pairs: &[Pair], k: usize, seed: u64) -> Result<Vec<Prediction>> {
        match self {
            Self::Trained(m) => {
                let refs: Vec<&Pair> = pairs.iter().collect();
                let ids: Vec<u64> = (0..pairs.len() as u64).collect();
                m.predict(&refs, &ids, k, seed)
            }
            Self::Classical { cfg, data, .. } => pairs
                .iter()
                .map(|p| {
                    let op = data.operator(p.beat.heart_id).ok_or_else(|| {
                        Error::Config(format!("no transfer operator for heart {}", p.beat.heart_id))
                    })?;
                    Ok(Prediction {
                        mean: solve_beat(op, &p.record, cfg)?,
                        spread: None,
                    })
                })
                .collect(),
            Self::Zero => Ok(pairs
                .iter()
                .map(|p| Prediction {
                    mean: Tensor::zeros(p.beat.potentials.shape()),
                    spread: None,
                })
                .collect()),
            Self::Oracle => Ok(pairs
                .iter()
                .map(|p| Prediction {
                    mean: p.beat.potentials.clone(),
                    spread: None,
                })
                .collect()),
        }
    }
}

/// Scores `method` on the test split of `data`.
pub fn evaluate(method: &Method, data: &DatasetSplit, k: usize, seed: u64) -> Result<MetricsReport> {
    if data.test.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty test split".into()));
    }
    if let Method::Trained(m) = method {
        m.check_dims(data.n_h, data.n_b)?;
    }
    let start = Instant::now();
    let preds = method.predict(&data.test, k, seed)?;
    let mut acc = Accumulator::default();
    for (p, pair) in preds.iter().zip(&data.test) {
        acc.add(&p.mean, &pair.beat.potentials, pair.beat.heart_id, pair.beat.pacing_site)?;
    }
    let (temporal_cc, mse, mae, cc_excluded, per_beat) = acc.finish()?;
    let (param_count, epochs) = match method {
        Method::Trained(m) => (m.param_count(), m.spec.epochs_trained),
        _ => (0, 0),
    };
    Ok(MetricsReport {
        method: method.name(),
        temporal_cc,
        mse,
        mae,
        cc_excluded,
        per_beat,
        param_count,
        epochs,
        split_checksum: split_checksum(data),
        config_fingerprint: String::new(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Resolves λ or the truncation rank of a classical method, choosing unset
/// values by validation MSE (training pairs stand in for an empty
/// validation split).
pub fn classical_config(kind: ModelKind, cfg: &ExperimentConfig, data: &DatasetSplit) -> Result<RegularizationConfig> {
    let tuning = if data.validation.is_empty() { &data.train } else { &data.validation };
    let op_of = |id: u32| data.operator(id).cloned();
    match kind {
        ModelKind::Tikhonov0 | ModelKind::Tikhonov1 => {
            let reg = if kind == ModelKind::Tikhonov0 {
                RegOperator::Identity
            } else {
                RegOperator::FirstDifference
            };
            let lambda = match cfg.classical.lambda {
                Some(l) => l,
                None => select_lambda(tuning, op_of, reg, &LAMBDA_GRID)?.0,
            };
            Ok(RegularizationConfig::tikhonov(lambda, reg))
        }
        ModelKind::Tsvd => {
            if let Some(k) = cfg.classical.rank {
                return Ok(RegularizationConfig::tsvd(k));
            }
            let (_, op) = data
                .operators
                .first()
                .ok_or_else(|| Error::Config("dataset carries no transfer operators".into()))?;
            let max_rank = svd(&op.matrix)?.rank();
            let mut best: Option<(usize, f64)> = None;
            for k in 1..=max_rank {
                let rc = RegularizationConfig::tsvd(k);
                let mut se = 0.0;
                let mut n = 0;
                for p in tuning {
                    let op = op_of(p.beat.heart_id)
                        .ok_or_else(|| Error::Config(format!("no transfer operator for heart {}", p.beat.heart_id)))?;
                    let x = match solve_beat(&op, &p.record, &rc) {
                        Ok(x) => x,
                        // this heart's operator has lower numerical rank
                        Err(Error::Contract(_)) => continue,
                        Err(e) => return Err(e),
                    };
                    se += mse_mae(&x, &p.beat.potentials)?.0 * x.len() as f64;
                    n += x.len();
                }
                let mse = se / n.max(1) as f64;
                if best.is_none_or(|(_, m)| mse < m) {
                    best = Some((k, mse));
                }
            }
            Ok(RegularizationConfig::tsvd(best.map_or(1, |b| b.0)))
        }
        _ => Err(Error::Config(format!("{} is not a classical method", kind.name()))),
    }
}

/// One comparison row: a report or the reason the method failed.
#[derive(Debug)]
pub struct ComparisonRow {
    pub method: String,
    pub result: Result<MetricsReport, String>,
}

#[derive(Debug)]
pub struct Comparison {
    /// Ordered by method name.
    pub rows: Vec<ComparisonRow>,
    /// Noise schedule of the diffusion row, named in the table footer.
    pub schedule: crate::diffusion::ScheduleKind,
}

pub const COMPARISON_HEADER: &str = "method,status,temporal_cc,mse,mae,cc_excluded,param_count,epochs,split_checksum";

impl Comparison {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.result.is_ok())
    }

    pub fn get(&self, method: &str) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .and_then(|r| r.result.as_ref().ok())
    }

    /// Fixed-header CSV. Wall-clock time is left out so identical runs
    /// produce identical files.
    pub fn csv(&self) -> String {
        let mut s = String::from(COMPARISON_HEADER);
        s.push('\n');
        for r in &self.rows {
            match &r.result {
                Ok(m) => {
                    let _ = writeln!(
                        s,
                        "{},ok,{:.6},{:.6},{:.6},{},{},{},{}",
                        r.method, m.temporal_cc, m.mse, m.mae, m.cc_excluded, m.param_count, m.epochs, m.split_checksum
                    );
                }
                Err(e) => {
                    let msg = e.replace([',', '\n'], ";");
                    let _ = writeln!(s, "{},failed: {msg},,,,,,,", r.method);
                }
            }
        }
        s
    }

    /// Aligned plain-text table including wall-clock times.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>8} {:>10} {:>8} {:>8} {:>6} {:>9}\n",
            "method", "CC", "MSE", "MAE", "params", "epochs", "time_s"
        );
        for r in &self.rows {
            match &r.result {
                Ok(m) => {
                    let _ = writeln!(
                        s,
                        "{:<12} {:>8.4} {:>10.4} {:>8.4} {:>8} {:>6} {:>9.1}",
                        r.method, m.temporal_cc, m.mse, m.mae, m.param_count, m.epochs, m.wall_clock_s
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{:<12} FAILED: {e}", r.method);
                }
            }
        }
        s.push_str("MSE/MAE in millivolts (raw units). CC: mean Pearson over (electrode, beat) pairs.\n");
        s.push_str("Classical rows use the known transfer operator: a reference oracle, not a reproduction.\n");
        s.push_str(&format!("Noise schedule: {}.\n", super::model::schedule_note(self.schedule)));
        s
    }
}

/// Trains and evaluates the four learned methods plus `cfg.classical_rows`
/// on one shared split. A failing row is recorded and the rest still run.
pub fn run_comparison(cfg: &ExperimentConfig, data: &DatasetSplit) -> Result<Comparison> {
    Ok(run_comparison_keeping_models(cfg, data)?.0)
}

/// [`run_comparison`], also returning the trained networks.
pub fn run_comparison_keeping_models(cfg: &ExperimentConfig, data: &DatasetSplit) -> Result<(Comparison, Vec<TrainedModel>)> {
    cfg.validate()?;
    let capacity: Vec<_> = crate::models::BaselineKind::ALL
        .iter()
        .map(|&k| cfg.baseline(k).clone())
        .collect();
    crate::models::check_capacity(&capacity, data.n_h, data.n_b)?;
    let reference = split_checksum(data);
    let mut kinds: Vec<ModelKind> = ModelKind::LEARNED.to_vec();
    for k in &cfg.classical_rows {
        if !kinds.contains(k) {
            kinds.push(*k);
        }
    }
    kinds.sort_by_key(|k| k.name());
    let k_samples = cfg.diffusion.samples;
    let mut rows = Vec::with_capacity(kinds.len());
    let mut models = Vec::new();
    for kind in kinds {
        let start = Instant::now();
        let result = (|| -> Result<MetricsReport> {
            let mut report = if kind.is_learned() {
                let run = ExperimentConfig {
                    model: kind,
                    ..cfg.clone()
                };
                let trained = train(&run, data, None)?.model;
                let report = evaluate(&Method::Trained(&trained), data, k_samples, cfg.seed)?;
                models.push(trained);
                report
            } else {
                let rc = classical_config(kind, cfg, data)?;
                evaluate(&Method::Classical { kind, cfg: rc, data }, data, k_samples, cfg.seed)?
            };
            if report.split_checksum != reference {
                return Err(Error::Contract(format!("{} saw a different split", kind.name())));
            }
            report.config_fingerprint = cfg.fingerprint();
            report.wall_clock_s = start.elapsed().as_secs_f64();
            Ok(report)
        })();
        rows.push(ComparisonRow {
            method: kind.name().to_owned(),
            result: result.map_err(|e| e.to_string()),
        });
    }
    Ok((
        Comparison {
            rows,
            schedule: cfg.diffusion.schedule,
        },
        models,
    ))
}

/// Electrode selections and trace CSV for one test beat.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceExport {
    pub by_cc: Vec<usize>,
    pub by_mse: Vec<usize>,
    pub csv: String,
}

pub const TRACE_HEADER: &str = "criterion,rank,electrode,t,truth,pred_mean,pred_spread";

/// Writes truth, predicted mean and per-sample spread for the `k`
/// electrodes with the highest temporal CC and the `k` with the lowest MSE
/// (or for `explicit` electrodes when given).
pub fn export_traces(
    method: &Method,
    data: &DatasetSplit,
    beat: usize,
    k: usize,
    explicit: Option<&[usize]>,
    samples: usize,
    seed: u64,
) -> Result<TraceExport> {
    let pair = data
        .test
        .get(beat)
        .ok_or_else(|| Error::Contract(format!("beat {beat} out of range for {} test beats", data.test.len())))?;
    let n_h = pair.beat.potentials.rows();
    if k > n_h {
        return Err(Error::Contract(format!("k = {k} exceeds {n_h} electrodes")));
    }
    if let Some(bad) = explicit.and_then(|e| e.iter().find(|&&i| i >= n_h)) {
        return Err(Error::Contract(format!("electrode {bad} out of range for {n_h}")));
    }
    let mut csv = String::from(TRACE_HEADER);
    csv.push('\n');
    if k == 0 && explicit.is_none_or(|e| e.is_empty()) {
        return Ok(TraceExport {
            by_cc: Vec::new(),
            by_mse: Vec::new(),
            csv,
        });
    }
    let pred = method.predict(std::slice::from_ref(pair), samples, seed)?.remove(0);
    let truth = &pair.beat.potentials;
    let cc = temporal_cc(&pred.mean, truth)?;
    let mse: Vec<f64> = (0..n_h)
        .map(|i| {
            pred.mean
                .row(i)
                .iter()
                .zip(truth.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / truth.cols() as f64
        })
        .collect();
    let mut by_cc: Vec<usize> = (0..n_h).filter(|&i| cc.per_electrode[i].is_some()).collect();
    by_cc.sort_by(|&a, &b| cc.per_electrode[b].unwrap().total_cmp(&cc.per_electrode[a].unwrap()).then(a.cmp(&b)));
    by_cc.truncate(k);
    let mut by_mse: Vec<usize> = (0..n_h).collect();
    by_mse.sort_by(|&a, &b| mse[a].total_cmp(&mse[b]).then(a.cmp(&b)));
    by_mse.truncate(k);

    let mut groups: Vec<(&str, &[usize])> = vec![("top_cc", &by_cc), ("low_mse", &by_mse)];
    if let Some(e) = explicit {
        groups = vec![("explicit", e)];
    }
    for (name, electrodes) in groups {
        for (rank, &e) in electrodes.iter().enumerate() {
            for t in 0..truth.cols() {
                let spread = pred.spread.as_ref().map_or(0.0, |s| s.at(e, t));
                let _ = writeln!(
                    csv,
                    "{name},{rank},{e},{t},{:e},{:e},{:e}",
                    truth.at(e, t),
                    pred.mean.at(e, t),
                    spread
                );
            }
        }
    }
    Ok(TraceExport { by_cc, by_mse, csv })
}
