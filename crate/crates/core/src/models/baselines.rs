//! Deterministic regressors `y ↦ x̂` trained with a squared-error loss.

use serde::{Deserialize, Serialize};

use super::layers::{batch_of, positional_tokens, Builder, Dense, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Cnn1d,
    Lstm,
    Transformer,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Cnn1d, BaselineKind::Lstm, BaselineKind::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cnn1d => "cnn1d",
            Self::Lstm => "lstm",
            Self::Transformer => "transformer",
        }
    }
}

/// Per-kind widths. `hidden` is the CNN channel count, the LSTM state size
/// or the transformer `d_model`; `depth` counts conv layers, stacked LSTM
/// layers or encoder layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub hidden: usize,
    pub depth: usize,
    /// CNN only; must be odd.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Transformer only.
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Transformer only.
    #[serde(default = "default_ff")]
    pub ff_width: usize,
}

fn default_kernel() -> usize {
    5
}

fn default_heads() -> usize {
    4
}

fn default_ff() -> usize {
    128
}

impl BaselineConfig {
    /// Widths chosen so the three kinds land near 68k parameters at the
    /// desk dimensions (N_h = 24, N_b = 12).
    pub fn default_for(kind: BaselineKind) -> Self {
        let (hidden, depth) = match kind {
            BaselineKind::Cnn1d => (100, 3),
            BaselineKind::Lstm => (120, 1),
            BaselineKind::Transformer => (64, 2),
        };
        Self {
            kind,
            hidden,
            depth,
            kernel: default_kernel(),
            n_heads: default_heads(),
            ff_width: default_ff(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.depth == 0 {
            return Err(Error::Config(format!("{} needs positive hidden and depth", self.kind.name())));
        }
        if self.kind == BaselineKind::Cnn1d && self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("CNN kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Parameter count of the network this config builds.
    pub fn param_count(&self, n_h: usize, n_b: usize) -> Result<usize> {
        Ok(Baseline::new(self, n_h, n_b, 0)?.params().scalar_count())
    }
}

/// Largest allowed ratio between baseline parameter counts.
pub const CAPACITY_TOLERANCE: f64 = 1.25;

/// Checks that the configs' parameter counts are within ±25% of each other
/// and returns them.
pub fn check_capacity(configs: &[BaselineConfig], n_h: usize, n_b: usize) -> Result<Vec<usize>> {
    let counts = configs
        .iter()
        .map(|c| c.param_count(n_h, n_b))
        .collect::<Result<Vec<_>>>()?;
    if let (Some(lo), Some(hi)) = (counts.iter().min(), counts.iter().max()) {
        if *hi as f64 > CAPACITY_TOLERANCE * *lo as f64 {
            return Err(Error::Config(format!(
                "baseline capacities not matched: parameter counts {counts:?}"
            )));
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug)]
enum Arch {
    Cnn {
        kernel: usize,
        /// Weight slot `(kernel·c_in)×c_out` and bias slot per layer.
        layers: Vec<(usize, usize)>,
    },
    Lstm {
        hidden: usize,
        /// `(W_x, W_h, b)` slots per stacked layer.
        layers: Vec<(usize, usize, usize)>,
        readout: Dense,
    },
    Transformer {
        d: usize,
        input: Dense,
        encoder: Encoder,
        head: Dense,
    },
}

#[derive(Clone, Debug)]
pub struct Baseline {
    pub cfg: BaselineConfig,
    pub n_h: usize,
    pub n_b: usize,
    store: ParamStore,
    arch: Arch,
}

impl Baseline {
    pub fn new(cfg: &BaselineConfig, n_h: usize, n_b: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_h == 0 || n_b == 0 {
            return Err(Error::Config("baseline dimensions must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed);
        let h = cfg.hidden;
        let arch = match cfg.kind {
            BaselineKind::Cnn1d => {
                let mut widths = vec![n_b];
                widths.extend(std::iter::repeat_n(h, cfg.depth - 1));
                widths.push(n_h);
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        (
                            b.weight(&format!("conv{i}.w"), cfg.kernel * w[0], w[1]),
                            b.constant(&format!("conv{i}.b"), &[w[1]], 0.0),
                        )
                    })
                    .collect();
                Arch::Cnn {
                    kernel: cfg.kernel,
                    layers,
                }
            }
            BaselineKind::Lstm => {
                let layers = (0..cfg.depth)
                    .map(|i| {
                        let fan_in = if i == 0 { n_b } else { h };
                        let wx = b.weight(&format!("lstm{i}.wx"), fan_in, 4 * h);
                        let wh = b.weight(&format!("lstm{i}.wh"), h, 4 * h);
                        // forget-gate bias starts at 1
                        let mut bias = vec![0.0; 4 * h];
                        bias[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                        let bs = b.store.push(
                            format!("lstm{i}.b"),
                            crate::numeric::Tensor::new(vec![4 * h], bias).expect("bias shape"),
                        );
                        (wx, wh, bs)
                    })
                    .collect();
                Arch::Lstm {
                    hidden: h,
                    layers,
                    readout: b.dense("readout", h, n_h),
                }
            }
            BaselineKind::Transformer => {
                let enc = EncoderConfig {
                    d_model: h,
                    n_heads: cfg.n_heads,
                    n_layers: cfg.depth,
                    ff_width: cfg.ff_width,
                };
                enc.validate()?;
                Arch::Transformer {
                    d: h,
                    input: b.dense("input", n_b, h),
                    encoder: Encoder::build(&mut b, "encoder", &enc),
                    head: b.dense("head", h, n_h),
                }
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            n_h,
            n_b,
            store,
            arch,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Maps `(B·seq)×n_b` tokens to `(B·seq)×n_h`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], y: Var, seq: usize) -> Result<Var> {
        let batch = batch_of(tape, y, seq, self.n_b, "baseline_forward")?;
        match &self.arch {
            Arch::Cnn { kernel, layers } => {
                let mut h = y;
                for (i, &(w, b)) in layers.iter().enumerate() {
                    h = tape.conv1d(h, p[w], seq, *kernel)?;
                    h = tape.add_row(h, p[b])?;
                    if i + 1 < layers.len() {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            Arch::Lstm { hidden, layers, readout } => {
                let mut input = y;
                // rows of `input` are time-major (s·B + b) after the first layer
                let mut time_major = false;
                for &(wx, wh, b) in layers {
                    let xw = tape.matmul(input, p[wx])?;
                    let xw = tape.add_row(xw, p[b])?;
                    let mut state: Option<(Var, Var)> = None;
                    let mut outs = Vec::with_capacity(seq);
                    for s in 0..seq {
                        let g = if time_major {
                            tape.slice(xw, 0, s * batch, batch)?
                        } else {
                            let rows: Vec<usize> = (0..batch).map(|bi| bi * seq + s).collect();
                            tape.gather_rows(xw, &rows)?
                        };
                        let g = match state {
                            Some((h, _)) => {
                                let r = tape.matmul(h, p[wh])?;
                                tape.add(g, r)?
                            }
                            None => g,
                        };
                        let gate = |tape: &mut Tape, k: usize| tape.slice(g, 1, k * hidden, *hidden);
                        let i_g = gate(tape, 0)?;
                        let i_g = tape.sigmoid(i_g)?;
                        let f_g = gate(tape, 1)?;
                        let f_g = tape.sigmoid(f_g)?;
                        let c_g = gate(tape, 2)?;
                        let c_g = tape.tanh(c_g)?;
                        let o_g = gate(tape, 3)?;
                        let o_g = tape.sigmoid(o_g)?;
                        let ic = tape.mul(i_g, c_g)?;
                        let c = match state {
                            Some((_, c_prev)) => {
                                let fc = tape.mul(f_g, c_prev)?;
                                tape.add(fc, ic)?
                            }
                            None => ic,
                        };
                        let tc = tape.tanh(c)?;
                        let h = tape.mul(o_g, tc)?;
                        outs.push(h);
                        state = Some((h, c));
                    }
                    input = tape.concat(&outs, 0)?;
                    time_major = true;
                }
                let out = readout.apply(tape, p, input)?;
                let order: Vec<usize> = (0..batch)
                    .flat_map(|bi| (0..seq).map(move |s| s * batch + bi))
                    .collect();
                tape.gather_rows(out, &order)
            }
            Arch::Transformer { d, input, encoder, head } => {
                let h = input.apply(tape, p, y)?;
                let pos = tape.constant(positional_tokens(batch, seq, *d));
                let h = tape.add(h, pos)?;
                let h = encoder.apply(tape, p, h, seq)?;
                head.apply(tape, p, h)
            }
        }
    }
}
