use serde::{Deserialize, Serialize};

use super::layers::{batch_of, positional_tokens, Builder, Dense, Encoder, EncoderConfig};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerDenoiserConfig {
    pub encoder: EncoderConfig,
    /// Width of the sinusoidal step embedding fed to the step projection.
    pub time_dim: usize,
}

impl Default for TransformerDenoiserConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            time_dim: 64,
        }
    }
}

/// `ε_θ(x_t, t, y)`: each time sample is one token built from the stacked
/// `x_t` and `y` columns; the step embedding is added to every token.
#[derive(Clone, Debug)]
pub struct TransformerDenoiser {
    pub cfg: TransformerDenoiserConfig,
    pub n_h: usize,
    pub n_b: usize,
    /// Largest accepted diffusion step.
    pub max_step: usize,
    store: ParamStore,
    input: Dense,
    time1: Dense,
    time2: Dense,
    encoder: Encoder,
    head: Dense,
}

impl TransformerDenoiser {
    pub fn new(cfg: &TransformerDenoiserConfig, n_h: usize, n_b: usize, max_step: usize, seed: u64) -> Result<Self> {
        cfg.encoder.validate()?;
        if cfg.time_dim == 0 || n_h == 0 || n_b == 0 || max_step == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        let d = cfg.encoder.d_model;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let input = b.dense("input", n_h + n_b, d);
        let time1 = b.dense("time1", cfg.time_dim, d);
        let time2 = b.dense("time2", d, d);
        let encoder = Encoder::build(&mut b, "encoder", &cfg.encoder);
        let head = b.zero_dense("head", d, n_h);
        Ok(Self {
            cfg: cfg.clone(),
            n_h,
            n_b,
            max_step,
            store,
            input,
            time1,
            time2,
            encoder,
            head,
        })
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl NoisePredictor for TransformerDenoiser {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn predict_noise(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x_t: Var,
        steps: &[usize],
        y: Var,
        seq: usize,
    ) -> Result<Var> {
        let batch = batch_of(tape, x_t, seq, self.n_h, "transformer_denoise")?;
        if batch_of(tape, y, seq, self.n_b, "transformer_denoise")? != batch || steps.len() != batch {
            return Err(crate::error::dim_err("transformer_denoise", tape.shape(x_t), tape.shape(y)));
        }
        if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > self.max_step) {
            return Err(Error::Contract(format!("diffusion step {t} outside 1..={}", self.max_step)));
        }
        let d = self.cfg.encoder.d_model;
        let tokens = tape.concat(&[x_t, y], 1)?;
        let h = self.input.apply(tape, p, tokens)?;
        let pos = tape.constant(positional_tokens(batch, seq, d));
        let h = tape.add(h, pos)?;

        let t: Vec<f64> = steps.iter().map(|&t| t as f64).collect();
        let temb = tape.constant(Tensor::sinusoidal_embedding(&t, self.cfg.time_dim));
        let temb = self.time1.apply(tape, p, temb)?;
        let temb = tape.gelu(temb)?;
        let temb = self.time2.apply(tape, p, temb)?;
        let rows: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, seq)).collect();
        let temb = tape.gather_rows(temb, &rows)?;
        let h = tape.add(h, temb)?;

        let h = self.encoder.apply(tape, p, h, seq)?;
        self.head.apply(tape, p, h)
    }
}
