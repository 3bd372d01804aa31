//! Parameter-slot building blocks shared by the architectures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tape, Tensor, Var};
use crate::rng::{self, Rng};

const LN_EPS: f64 = 1e-5;

/// Registers parameters with seeded `N(0, 1/fan_in)` weights.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    rng: Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: rng::stream(seed, &[0x1417]),
        }
    }

    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> usize {
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = rng::normals(&mut self.rng, fan_in * fan_out)
            .into_iter()
            .map(|v| v * std)
            .collect();
        self.store
            .push(name, Tensor::new(vec![fan_in, fan_out], data).expect("weight shape"))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> usize {
        self.store.push(name, Tensor::full(shape, value))
    }

    pub fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            w: self.weight(&format!("{name}.w"), fan_in, fan_out),
            b: self.constant(&format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    /// A dense layer whose weights start at zero.
    pub fn zero_dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            w: self.constant(&format!("{name}.w"), &[fan_in, fan_out], 0.0),
            b: self.constant(&format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    pub fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gain: self.constant(&format!("{name}.gain"), &[width], 1.0),
            bias: self.constant(&format!("{name}.bias"), &[width], 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.w])?;
        tape.add_row(h, p[self.b])
    }
}

/// Layer normalization over features with a learned affine map.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    gain: usize,
    bias: usize,
}

impl Norm {
    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, 1, LN_EPS)?;
        let g = tape.mul_row(n, p[self.gain])?;
        tape.add_row(g, p[self.bias])
    }
}

/// Width and depth of a pre-norm transformer encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ff_width: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ff_width == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: Norm,
    qkv: Dense,
    out: Dense,
    norm2: Norm,
    ff1: Dense,
    ff2: Dense,
}

/// Stack of pre-norm self-attention and GELU feedforward blocks, followed by
/// a final normalization.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    heads: usize,
    layers: Vec<EncoderLayer>,
    final_norm: Norm,
}

impl Encoder {
    pub fn build(b: &mut Builder, prefix: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let n = |s: &str| format!("{prefix}.layer{i}.{s}");
                EncoderLayer {
                    norm1: b.norm(&n("norm1"), d),
                    qkv: b.dense(&n("qkv"), d, 3 * d),
                    out: b.dense(&n("attn_out"), d, d),
                    norm2: b.norm(&n("norm2"), d),
                    ff1: b.dense(&n("ff1"), d, cfg.ff_width),
                    ff2: b.dense(&n("ff2"), cfg.ff_width, d),
                }
            })
            .collect();
        Self {
            heads: cfg.n_heads,
            layers,
            final_norm: b.norm(&format!("{prefix}.final_norm"), d),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &[Var], mut h: Var, seq: usize) -> Result<Var> {
        for l in &self.layers {
            let a = l.norm1.apply(tape, p, h)?;
            let qkv = l.qkv.apply(tape, p, a)?;
            let att = tape.attention(qkv, seq, self.heads)?;
            let o = l.out.apply(tape, p, att)?;
            h = tape.add(h, o)?;
            let a = l.norm2.apply(tape, p, h)?;
            let f = l.ff1.apply(tape, p, a)?;
            let f = tape.gelu(f)?;
            let f = l.ff2.apply(tape, p, f)?;
            h = tape.add(h, f)?;
        }
        self.final_norm.apply(tape, p, h)
    }
}

/// Sinusoidal positional encoding over `0..seq`, tiled for `batch` signals.
pub(crate) fn positional_tokens(batch: usize, seq: usize, d: usize) -> Tensor {
    let pos: Vec<f64> = (0..seq).map(|s| s as f64).collect();
    let one = Tensor::sinusoidal_embedding(&pos, d);
    let mut data = Vec::with_capacity(batch * seq * d);
    for _ in 0..batch {
        data.extend_from_slice(one.data());
    }
    Tensor::new(vec![batch * seq, d], data).expect("positional shape")
}

pub(crate) fn batch_of(tape: &Tape, x: Var, seq: usize, width: usize, op: &'static str) -> Result<usize> {
    let s = tape.shape(x);
    if seq == 0 || s.len() != 2 || !s[0].is_multiple_of(seq) || s[1] != width {
        return Err(crate::error::dim_err(op, s, &[seq, width]));
    }
    Ok(s[0] / seq)
}
