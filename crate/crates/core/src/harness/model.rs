//! Trained networks together with their normalization and persistence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind};
use crate::diffusion::{build_schedule, sample_posteriors, DiffusionConfig, NoisePredictor};
use crate::error::{dim_err, Error, Result};
use crate::forward_sim::Pair;
use crate::models::{from_tokens, to_tokens, Baseline, BaselineConfig, TransformerDenoiser, TransformerDenoiserConfig};
use crate::numeric::{checkpoint, ParamStore, Tape, Tensor, Var};

/// Batches larger than this are split for inference.
const INFER_CHUNK: usize = 64;
const STD_FLOOR: f64 = 1e-6;

/// Per-channel z-score statistics from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn channel_stats(signals: &[&Tensor]) -> (Vec<f64>, Vec<f64>) {
    let c = signals[0].rows();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    let n = (signals.len() * signals[0].cols()) as f64;
    for s in signals {
        for (i, m) in mean.iter_mut().enumerate() {
            *m += s.row(i).iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for s in signals {
        for (i, v) in std.iter_mut().enumerate() {
            *v += s.row(i).iter().map(|x| (x - mean[i]).powi(2)).sum::<f64>();
        }
    }
    std.iter_mut().for_each(|v| *v = (*v / n).sqrt().max(STD_FLOOR));
    (mean, std)
}

impl NormStats {
    pub fn from_pairs(pairs: &[Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("normalization needs a non-empty training split".into()));
        }
        let xs: Vec<&Tensor> = pairs.iter().map(|p| &p.beat.potentials).collect();
        let ys: Vec<&Tensor> = pairs.iter().map(|p| &p.record.potentials).collect();
        let (x_mean, x_std) = channel_stats(&xs);
        let (y_mean, y_std) = channel_stats(&ys);
        Ok(Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    /// Token-major normalized copy of a `channels×T` signal.
    fn encode(signal: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
        if signal.rows() != mean.len() {
            return Err(dim_err("normalize", signal.shape(), &[mean.len()]));
        }
        let mut tok = to_tokens(&[signal])?;
        let c = mean.len();
        for row in tok.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
                *v = (*v - m) / s;
            }
        }
        Ok(tok)
    }

    pub fn encode_x(&self, x: &Tensor) -> Result<Tensor> {
        Self::encode(x, &self.x_mean, &self.x_std)
    }

    pub fn encode_y(&self, y: &Tensor) -> Result<Tensor> {
        Self::encode(y, &self.y_mean, &self.y_std)
    }

    /// Back to millivolts, `channels×T`.
    pub fn decode_x(&self, tokens: &Tensor) -> Result<Tensor> {
        let c = self.x_mean.len();
        if tokens.cols() != c {
            return Err(dim_err("denormalize", tokens.shape(), &[c]));
        }
        let mut t = tokens.clone();
        for row in t.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.x_mean).zip(&self.x_std) {
                *v = *v * s + m;
            }
        }
        Ok(from_tokens(&t, t.rows())?.remove(0))
    }

    fn entries(&self) -> Vec<(String, Tensor)> {
        [
            ("norm.x_mean", &self.x_mean),
            ("norm.x_std", &self.x_std),
            ("norm.y_mean", &self.y_mean),
            ("norm.y_std", &self.y_std),
        ]
        .into_iter()
        .map(|(n, v)| (n.to_owned(), Tensor::new(vec![v.len()], v.clone()).expect("vector")))
        .collect()
    }

    fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<Vec<f64>> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        Ok(Self {
            x_mean: get("norm.x_mean")?,
            x_std: get("norm.x_std")?,
            y_mean: get("norm.y_mean")?,
            y_std: get("norm.y_std")?,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Diffusion(TransformerDenoiser),
    Baseline(Baseline),
}

impl Network {
    pub fn params(&self) -> &ParamStore {
        match self {
            Self::Diffusion(m) => m.params(),
            Self::Baseline(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Diffusion(m) => m.store_mut(),
            Self::Baseline(m) => m.store_mut(),
        }
    }
}

/// JSON description stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_h: usize,
    pub n_b: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub denoiser: Option<TransformerDenoiserConfig>,
    pub baseline: Option<BaselineConfig>,
    pub epochs_trained: usize,
    pub best_epoch: usize,
    /// How the noise schedule was interpreted.
    pub schedule_note: String,
}

/// Point prediction (and spread, for the diffusion model) in millivolts.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `n_h×T`.
    pub mean: Tensor,
    pub spread: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub network: Network,
    pub norm: NormStats,
}

/// One-line description of a schedule kind for reports.
pub fn schedule_note(kind: crate::diffusion::ScheduleKind) -> &'static str {
    match kind {
        crate::diffusion::ScheduleKind::SqrtLinear => "sqrt_linear: beta linear in its square root (quadratic in t)",
        crate::diffusion::ScheduleKind::Linear => "linear: beta linear in t",
    }
}

impl TrainedModel {
    /// Freshly initialized network for `kind` on the given dimensions.
    pub fn init(cfg: &ExperimentConfig, kind: ModelKind, n_h: usize, n_b: usize, seq_len: usize, norm: NormStats) -> Result<Self> {
        let (network, denoiser, baseline) = match kind.baseline() {
            Some(b) => {
                let bc = cfg.baseline(b).clone();
                (Network::Baseline(Baseline::new(&bc, n_h, n_b, cfg.seed)?), None, Some(bc))
            }
            None if kind == ModelKind::Diffusion => (
                Network::Diffusion(TransformerDenoiser::new(
                    &cfg.denoiser,
                    n_h,
                    n_b,
                    cfg.diffusion.steps,
                    cfg.seed,
                )?),
                Some(cfg.denoiser.clone()),
                None,
            ),
            None => return Err(Error::Config(format!("{} is not a trainable model", kind.name()))),
        };
        Ok(Self {
            spec: ModelSpec {
                kind,
                n_h,
                n_b,
                seq_len,
                seed: cfg.seed,
                diffusion: cfg.diffusion.clone(),
                denoiser,
                baseline,
                epochs_trained: 0,
                best_epoch: 0,
                schedule_note: schedule_note(cfg.diffusion.schedule).to_owned(),
            },
            network,
            norm,
        })
    }

    pub fn param_count(&self) -> usize {
        self.network.params().scalar_count()
    }

    pub fn check_dims(&self, n_h: usize, n_b: usize) -> Result<()> {
        if (n_h, n_b) != (self.spec.n_h, self.spec.n_b) {
            return Err(Error::Config(format!(
                "model expects N_h={}, N_b={} but data has N_h={n_h}, N_b={n_b}",
                self.spec.n_h, self.spec.n_b
            )));
        }
        Ok(())
    }

    /// Predicts every pair's epicardial signal from its torso record.
    /// `k` posterior samples are averaged for the diffusion model; beat `i`
    /// uses sampling stream `ids[i]`.
    pub fn predict(&self, pairs: &[&Pair], ids: &[u64], k: usize, seed: u64) -> Result<Vec<Prediction>> {
        if let Some(p) = pairs.first() {
            self.check_dims(p.beat.potentials.rows(), p.record.potentials.rows())?;
        }
        let ys = pairs
            .iter()
            .map(|p| self.norm.encode_y(&p.record.potentials))
            .collect::<Result<Vec<_>>>()?;
        match &self.network {
            Network::Diffusion(m) => {
                let sched = build_schedule(&self.spec.diffusion)?;
                let post = sample_posteriors(m, &ys, ids, self.spec.n_h, &sched, k, seed)?;
                post.into_iter()
                    .map(|p| {
                        let spread = self.scale_spread(&p.spread)?;
                        Ok(Prediction {
                            mean: self.norm.decode_x(&p.mean)?,
                            spread: Some(spread),
                        })
                    })
                    .collect()
            }
            Network::Baseline(m) => {
                let mut out = Vec::with_capacity(ys.len());
                for chunk in ys.chunks(INFER_CHUNK) {
                    let seq = chunk[0].rows();
                    let mut data = Vec::with_capacity(chunk.len() * chunk[0].len());
                    chunk.iter().for_each(|y| data.extend_from_slice(y.data()));
                    let mut tape = Tape::new();
                    let p = m.params().bind_frozen(&mut tape);
                    let y = tape.constant(Tensor::new(vec![chunk.len() * seq, self.spec.n_b], data)?);
                    let x = m.forward(&mut tape, &p, y, seq)?;
                    for block in tape.value(x).data().chunks_exact(seq * self.spec.n_h) {
                        let tok = Tensor::new(vec![seq, self.spec.n_h], block.to_vec())?;
                        out.push(Prediction {
                            mean: self.norm.decode_x(&tok)?,
                            spread: None,
                        });
                    }
                }
                Ok(out)
            }
        }
    }

    /// Spread in millivolts: scale only, no offset.
    fn scale_spread(&self, spread: &Tensor) -> Result<Tensor> {
        let c = self.spec.n_h;
        let mut t = spread.clone();
        for row in t.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(&self.norm.x_std).for_each(|(v, s)| *v *= s);
        }
        Ok(from_tokens(&t, t.rows())?.remove(0))
    }

    /// Writes the tensor container and the JSON spec at `path.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries: Vec<(String, Tensor)> = self
            .network
            .params()
            .iter()
            .map(|(n, t)| (n.to_owned(), t.clone()))
            .collect();
        entries.extend(self.norm.entries());
        checkpoint::save(path, &entries)?;
        std::fs::write(spec_path(path), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let spec: ModelSpec = serde_json::from_str(&std::fs::read_to_string(spec_path(path))?)?;
        let entries = checkpoint::load(path)?;
        let norm = NormStats::from_entries(&entries)?;
        let mut cfg = ExperimentConfig {
            seed: spec.seed,
            diffusion: spec.diffusion.clone(),
            ..ExperimentConfig::default()
        };
        if let Some(d) = &spec.denoiser {
            cfg.denoiser = d.clone();
        }
        if let Some(b) = &spec.baseline {
            match b.kind {
                crate::models::BaselineKind::Cnn1d => cfg.cnn1d = b.clone(),
                crate::models::BaselineKind::Lstm => cfg.lstm = b.clone(),
                crate::models::BaselineKind::Transformer => cfg.transformer = b.clone(),
            }
        }
        let mut model = Self::init(&cfg, spec.kind, spec.n_h, spec.n_b, spec.seq_len, norm)?;
        model.network.params_mut().load_from(&entries)?;
        model.spec = spec;
        Ok(model)
    }
}

/// `model.ecgi` → `model.json`.
pub fn spec_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Binds parameters for training.
pub(crate) fn bind(net: &Network, tape: &mut Tape) -> Vec<Var> {
    net.params().bind(tape)
}
