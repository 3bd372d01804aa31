//! Conditional denoising diffusion: schedules, closed-form corruption, the
//! ε-prediction objective and ancestral posterior sampling.
//!
//! All tensors here are token-major: a batch of `B` signals of length `seq`
//! is a `(B·seq)×channels` matrix whose rows `b·seq..(b+1)·seq` belong to
//! signal `b`.

mod schedule;

use rand::Rng as _;

pub use schedule::{
    build_schedule, forward_sample, predict_x0, reverse_step, DiffusionConfig, NoiseSchedule, ScheduleKind,
};

use crate::error::{dim_err, Error, Result};
use crate::numeric::{ParamStore, Tape, Tensor, Var};
use crate::rng::{self, Rng};

/// Most reverse chains advanced by one network call during sampling.
pub const CHAIN_CHUNK: usize = 64;

/// A network `ε_θ(x_t, t, y)`.
pub trait NoisePredictor {
    fn params(&self) -> &ParamStore;

    /// `x_t` is `(B·seq)×n_h`, `y` is `(B·seq)×n_b`, and `steps[b]` is the
    /// diffusion step of signal `b`. Returns `(B·seq)×n_h`.
    fn predict_noise(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x_t: Var,
        steps: &[usize],
        y: Var,
        seq: usize,
    ) -> Result<Var>;
}

/// Recorded pieces of one noise-prediction loss evaluation.
pub struct NoiseLoss {
    pub loss: Var,
    pub eps_hat: Var,
    pub x_t: Tensor,
}

/// `mean‖ε − ε_θ(x_t, t, y)‖²` for given steps and noise.
#[allow(clippy::too_many_arguments)]
pub fn noise_loss(
    tape: &mut Tape,
    params: &[Var],
    model: &dyn NoisePredictor,
    x0: &Tensor,
    y: &Tensor,
    seq: usize,
    sched: &NoiseSchedule,
    steps: &[usize],
    eps: &Tensor,
) -> Result<NoiseLoss> {
    let rows = x0.rows();
    if seq == 0 || rows != steps.len() * seq || y.rows() != rows {
        return Err(dim_err("noise_loss", x0.shape(), y.shape()));
    }
    if eps.shape() != x0.shape() {
        return Err(dim_err("noise_loss", x0.shape(), eps.shape()));
    }
    let cols = x0.cols();
    let mut x_t = Tensor::zeros(x0.shape());
    for (b, &t) in steps.iter().enumerate() {
        sched.check_step(t)?;
        let (a, s) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let span = b * seq * cols..(b + 1) * seq * cols;
        for ((o, x), e) in x_t.data_mut()[span.clone()]
            .iter_mut()
            .zip(&x0.data()[span.clone()])
            .zip(&eps.data()[span])
        {
            *o = a * x + s * e;
        }
    }
    let xv = tape.constant(x_t.clone());
    let yv = tape.constant(y.clone());
    let ev = tape.constant(eps.clone());
    let eps_hat = model.predict_noise(tape, params, xv, steps, yv, seq)?;
    let diff = tape.sub(eps_hat, ev)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq)?;
    Ok(NoiseLoss { loss, eps_hat, x_t })
}

/// Draws a uniform step per signal and standard-normal noise.
pub fn draw_steps_and_noise(rng: &mut Rng, batch: usize, shape: &[usize], sched: &NoiseSchedule) -> (Vec<usize>, Tensor) {
    let steps: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=sched.steps())).collect();
    let n = shape.iter().product();
    let eps = Tensor::new(shape.to_vec(), rng::normals(rng, n)).expect("shape product matches");
    (steps, eps)
}

/// The training objective with freshly drawn steps and noise.
#[allow(clippy::too_many_arguments)]
pub fn train_loss(
    tape: &mut Tape,
    params: &[Var],
    model: &dyn NoisePredictor,
    x0: &Tensor,
    y: &Tensor,
    seq: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    if seq == 0 || !x0.rows().is_multiple_of(seq) {
        return Err(dim_err("train_loss", x0.shape(), &[seq]));
    }
    let (steps, eps) = draw_steps_and_noise(rng, x0.rows() / seq, x0.shape(), sched);
    Ok(noise_loss(tape, params, model, x0, y, seq, sched, &steps, &eps)?.loss)
}

/// Reverse-chain samples for one conditioning signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    /// Each `seq×n_h`, token-major.
    pub samples: Vec<Tensor>,
    pub mean: Tensor,
    /// Per-element population standard deviation across samples.
    pub spread: Tensor,
}

impl Posterior {
    fn from_samples(samples: Vec<Tensor>) -> Self {
        let k = samples.len() as f64;
        let mut mean = Tensor::zeros(samples[0].shape());
        for s in &samples {
            mean.data_mut().iter_mut().zip(s.data()).for_each(|(m, v)| *m += v);
        }
        mean.data_mut().iter_mut().for_each(|m| *m /= k);
        let mut spread = Tensor::zeros(mean.shape());
        for s in &samples {
            for ((d, v), m) in spread.data_mut().iter_mut().zip(s.data()).zip(mean.data()) {
                *d += (v - m).powi(2);
            }
        }
        spread.data_mut().iter_mut().for_each(|d| *d = (*d / k).sqrt());
        Self { samples, mean, spread }
    }
}

/// Runs `k` reverse chains from `x_T ~ N(0, I)` for every conditioning
/// signal in `ys` (each `seq×n_b`, token-major). Chain `j` of signal `i`
/// draws from the stream `(seed, ids[i], j)`, so results do not depend on
/// how chains are grouped into network calls.
pub fn sample_posteriors(
    model: &dyn NoisePredictor,
    ys: &[Tensor],
    ids: &[u64],
    n_h: usize,
    sched: &NoiseSchedule,
    k: usize,
    seed: u64,
) -> Result<Vec<Posterior>> {
    if k == 0 {
        return Err(Error::Contract("posterior sampling needs k >= 1".into()));
    }
    if ids.len() != ys.len() {
        return Err(Error::Contract(format!("{} ids for {} signals", ids.len(), ys.len())));
    }
    let Some(first) = ys.first() else {
        return Ok(Vec::new());
    };
    let (seq, n_b) = (first.rows(), first.cols());
    if let Some(bad) = ys.iter().find(|y| y.shape() != [seq, n_b]) {
        return Err(dim_err("sample_posterior", first.shape(), bad.shape()));
    }
    let chains: Vec<(usize, usize)> = (0..ys.len()).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    let mut finished: Vec<Tensor> = Vec::with_capacity(chains.len());
    for chunk in chains.chunks(CHAIN_CHUNK) {
        let mut rngs: Vec<Rng> = chunk.iter().map(|&(i, j)| rng::stream(seed, &[ids[i], j as u64])).collect();
        let c = chunk.len();
        let mut y_tok = Vec::with_capacity(c * seq * n_b);
        for &(i, _) in chunk {
            y_tok.extend_from_slice(ys[i].data());
        }
        let y_tok = Tensor::new(vec![c * seq, n_b], y_tok)?;
        let mut x = draw_chunk_noise(&mut rngs, seq * n_h, &[c * seq, n_h]);
        for t in (1..=sched.steps()).rev() {
            let mut tape = Tape::new();
            let params = model.params().bind_frozen(&mut tape);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y_tok.clone());
            let eps_hat = model
                .predict_noise(&mut tape, &params, xv, &vec![t; c], yv, seq)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Sampling { step: t },
                    other => other,
                })?;
            let z = (t > 1).then(|| draw_chunk_noise(&mut rngs, seq * n_h, &[c * seq, n_h]));
            x = reverse_step(&x, t, tape.value(eps_hat), sched, z.as_ref())?;
            if !x.is_finite() {
                return Err(Error::Sampling { step: t });
            }
        }
        for part in x.data().chunks_exact(seq * n_h) {
            finished.push(Tensor::new(vec![seq, n_h], part.to_vec())?);
        }
    }
    let mut it = finished.into_iter();
    Ok((0..ys.len())
        .map(|_| Posterior::from_samples(it.by_ref().take(k).collect()))
        .collect())
}

/// Single-signal convenience over [`sample_posteriors`].
pub fn sample_posterior(
    model: &dyn NoisePredictor,
    y: &Tensor,
    n_h: usize,
    sched: &NoiseSchedule,
    k: usize,
    seed: u64,
) -> Result<Posterior> {
    Ok(sample_posteriors(model, std::slice::from_ref(y), &[0], n_h, sched, k, seed)?.remove(0))
}

fn draw_chunk_noise(rngs: &mut [Rng], per_chain: usize, shape: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(rngs.len() * per_chain);
    for r in rngs.iter_mut() {
        data.extend(rng::normals(r, per_chain));
    }
    Tensor::new(shape.to_vec(), data).expect("chunk noise shape")
}
