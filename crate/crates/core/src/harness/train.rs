use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::{ExperimentConfig, ModelKind};
use super::metrics::Accumulator;
use super::model::{bind, Network, NormStats, TrainedModel};
use crate::diffusion::{
    build_schedule, draw_steps_and_noise, forward_sample, noise_loss, predict_x0, train_loss, NoisePredictor, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::forward_sim::{DatasetSplit, Pair};
use crate::numeric::{AdamState, Tape, Tensor, Var};
use crate::rng;

const STREAM_SHUFFLE: u64 = 11;
const STREAM_NOISE: u64 = 12;
const STREAM_VALIDATION: u64 = 13;
/// Validation beats per network call.
const VAL_CHUNK: usize = 64;

pub const LOG_HEADER: &str = "epoch,train_loss,val_cc,val_mse,wall_clock_s,val_loss";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Temporal CC of the validation estimate; NaN without validation data.
    pub val_cc: f64,
    /// Millivolt MSE of the validation estimate.
    pub val_mse: f64,
    pub wall_clock_s: f64,
    /// The quantity used to pick the retained checkpoint.
    pub val_loss: f64,
}

pub fn log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(
            s,
            "{},{:.6e},{:.6},{:.6},{:.3},{:.6e}",
            r.epoch, r.train_loss, r.val_cc, r.val_mse, r.wall_clock_s, r.val_loss
        );
    }
    s
}

pub struct TrainOutcome {
    /// The best-validation network.
    pub model: TrainedModel,
    pub log: Vec<EpochRecord>,
}

/// Normalized token blocks of a split, `T×channels` each.
struct Tokens {
    x: Vec<Tensor>,
    y: Vec<Tensor>,
}

impl Tokens {
    fn new(pairs: &[Pair], norm: &NormStats) -> Result<Self> {
        Ok(Self {
            x: pairs.iter().map(|p| norm.encode_x(&p.beat.potentials)).collect::<Result<_>>()?,
            y: pairs.iter().map(|p| norm.encode_y(&p.record.potentials)).collect::<Result<_>>()?,
        })
    }

    fn stack(blocks: &[Tensor], idx: &[usize]) -> Result<Tensor> {
        let (t, c) = (blocks[0].rows(), blocks[0].cols());
        let mut data = Vec::with_capacity(idx.len() * t * c);
        idx.iter().for_each(|&i| data.extend_from_slice(blocks[i].data()));
        Tensor::new(vec![idx.len() * t, c], data)
    }
}

/// Trains `cfg.model` on `data.train`, validating on `data.validation` after
/// each epoch and keeping the parameters with the lowest validation loss.
/// With `out` set, a non-finite loss saves the last finite parameters to
/// `out/last_finite.ecgi` before returning [`Error::Diverged`].
pub fn train(cfg: &ExperimentConfig, data: &DatasetSplit, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kind = cfg.model;
    if !kind.is_learned() {
        return Err(Error::Config(format!("{} is not trained", kind.name())));
    }
    let norm = NormStats::from_pairs(&data.train)?;
    let mut model = TrainedModel::init(cfg, kind, data.n_h, data.n_b, data.t, norm.clone())?;
    let train_tok = Tokens::new(&data.train, &norm)?;
    let val_tok = Tokens::new(&data.validation, &norm)?;
    let sched = build_schedule(&cfg.diffusion)?;
    let seq = data.t;

    let mut adam = AdamState::new(cfg.learning_rate, model.network.params().tensors());
    let mut best: Option<(f64, Vec<Tensor>, usize)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x0 = Tokens::stack(&train_tok.x, idx)?;
            let y = Tokens::stack(&train_tok.y, idx)?;
            let mut tape = Tape::new();
            let params = bind(&model.network, &mut tape);
            let step = || -> Result<(f64, Vec<Tensor>)> {
                let loss = match &model.network {
                    Network::Diffusion(m) => {
                        let mut r = rng::stream(cfg.seed, &[STREAM_NOISE, epoch as u64, bi as u64]);
                        train_loss(&mut tape, &params, m, &x0, &y, seq, &sched, &mut r)?
                    }
                    Network::Baseline(m) => regression_loss(&mut tape, &params, |t, p, y| m.forward(t, p, y, seq), &x0, &y)?,
                };
                let value = tape.value(loss).data()[0];
                let grads = tape.backward(loss)?.collect(&params);
                Ok((value, grads))
            };
            let (value, grads) = match step() {
                Ok(v) if v.0.is_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    if let Some(dir) = out {
                        std::fs::create_dir_all(dir)?;
                        model.save(dir.join("last_finite.ecgi"))?;
                    }
                    return Err(Error::Diverged { epoch, batch: bi });
                }
                Err(e) => return Err(e),
            };
            adam.step(model.network.params_mut().tensors_mut(), &grads)?;
            if !model.network.params().tensors().iter().all(Tensor::is_finite) {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            loss_sum += value * idx.len() as f64;
            loss_n += idx.len();
        }
        let train_loss_mean = loss_sum / loss_n.max(1) as f64;
        let (val_loss, val_cc, val_mse) = if data.validation.is_empty() {
            (train_loss_mean, f64::NAN, f64::NAN)
        } else {
            validate(&model, &val_tok, &data.validation, &sched, cfg.seed)?
        };
        log.push(EpochRecord {
            epoch,
            train_loss: train_loss_mean,
            val_cc,
            val_mse,
            wall_clock_s: start.elapsed().as_secs_f64(),
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, model.network.params().tensors().to_vec(), epoch));
        }
    }

    model.spec.epochs_trained = cfg.epochs;
    if let Some((_, params, epoch)) = best {
        model.network.params_mut().tensors_mut().clone_from_slice(&params);
        model.spec.best_epoch = epoch;
    }
    Ok(TrainOutcome { model, log })
}

fn regression_loss(
    tape: &mut Tape,
    params: &[Var],
    forward: impl FnOnce(&mut Tape, &[Var], Var) -> Result<Var>,
    x0: &Tensor,
    y: &Tensor,
) -> Result<Var> {
    let yv = tape.constant(y.clone());
    let xv = tape.constant(x0.clone());
    let pred = forward(tape, params, yv)?;
    let d = tape.sub(pred, xv)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// First step at which half the signal power is gone (`ᾱ_t ≤ 0.5`), or the
/// last step if the schedule never gets there.
fn half_signal_step(sched: &NoiseSchedule) -> usize {
    (1..=sched.steps()).find(|&t| sched.alpha_bar(t) <= 0.5).unwrap_or(sched.steps())
}

/// `(loss, cc, mse)` on the validation split. The diffusion model is scored
/// by its noise-prediction loss at fixed steps and noise; its CC/MSE come
/// from the one-shot `x̂₀` estimate at the half-signal step, which costs one
/// network call instead of a full chain. Regressors use their direct output.
fn validate(model: &TrainedModel, tok: &Tokens, pairs: &[Pair], sched: &NoiseSchedule, seed: u64) -> Result<(f64, f64, f64)> {
    let seq = tok.x[0].rows();
    let mut acc = Accumulator::default();
    let (mut loss_sum, mut n) = (0.0, 0usize);
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for (ci, chunk) in idx.chunks(VAL_CHUNK).enumerate() {
        let x0 = Tokens::stack(&tok.x, chunk)?;
        let y = Tokens::stack(&tok.y, chunk)?;
        let mut tape = Tape::new();
        let params = model.network.params().bind_frozen(&mut tape);
        let (loss, est): (f64, Vec<Tensor>) = match &model.network {
            Network::Diffusion(m) => {
                let mut r = rng::stream(seed, &[STREAM_VALIDATION, ci as u64]);
                let (steps, eps) = draw_steps_and_noise(&mut r, chunk.len(), x0.shape(), sched);
                let nl = noise_loss(&mut tape, &params, m, &x0, &y, seq, sched, &steps, &eps)?;
                let t_half = half_signal_step(sched);
                let noise = Tensor::new(x0.shape().to_vec(), rng::normals(&mut r, x0.len()))?;
                let x_t = forward_sample(&x0, t_half, &noise, sched)?;
                let xv = tape.constant(x_t.clone());
                let yv = tape.constant(y.clone());
                let eh = m.predict_noise(&mut tape, &params, xv, &vec![t_half; chunk.len()], yv, seq)?;
                let x0_hat = predict_x0(&x_t, t_half, tape.value(eh), sched)?;
                let est = x0_hat
                    .data()
                    .chunks_exact(seq * x0.cols())
                    .map(|b| Tensor::new(vec![seq, x0.cols()], b.to_vec()))
                    .collect::<Result<_>>()?;
                (tape.value(nl.loss).data()[0], est)
            }
            Network::Baseline(m) => {
                let yv = tape.constant(y.clone());
                let pred = m.forward(&mut tape, &params, yv, seq)?;
                let p = tape.value(pred).clone();
                let (mse, _) = super::metrics::mse_mae(&p, &x0)?;
                let est = p
                    .data()
                    .chunks_exact(seq * p.cols())
                    .map(|b| Tensor::new(vec![seq, p.cols()], b.to_vec()))
                    .collect::<Result<_>>()?;
                (mse, est)
            }
        };
        loss_sum += loss * chunk.len() as f64;
        n += chunk.len();
        for (&i, e) in chunk.iter().zip(est) {
            let pred = model.norm.decode_x(&e)?;
            acc.add(&pred, &pairs[i].beat.potentials, 0, 0)?;
        }
    }
    let (cc, mse, _, _, _) = acc.finish()?;
    Ok((loss_sum / n as f64, cc, mse))
}

/// Evaluates `kind` untrained, as a reference for what training adds.
pub fn untrained(cfg: &ExperimentConfig, kind: ModelKind, data: &DatasetSplit) -> Result<TrainedModel> {
    let norm = NormStats::from_pairs(&data.train)?;
    TrainedModel::init(cfg, kind, data.n_h, data.n_b, data.t, norm)
}
