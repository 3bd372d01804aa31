//! Central finite-difference oracle and the gradient cases shared by the
//! gradient tests and the acceptance run.
#![allow(dead_code)]

use ecgi_core::diffusion::{build_schedule, noise_loss, DiffusionConfig, NoisePredictor};
use ecgi_core::models::{
    Baseline, BaselineConfig, BaselineKind, EncoderConfig, TransformerDenoiser, TransformerDenoiserConfig,
};
use ecgi_core::rng;
use ecgi_core::{ParamStore, Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Floor on the relative-error denominator so coordinates whose true
/// derivative is ~0 are judged on absolute error.
pub const FD_FLOOR: f64 = 1e-4;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut r = rng::stream(seed, &[99]);
    Tensor::new(shape.to_vec(), rng::normals(&mut r, n)).unwrap()
}

/// Like [`random`] but bounded away from zero, for kinked functions.
pub fn random_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

/// `sum(out ⊙ W)` with a fixed random `W`, so every output entry matters.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.shape(out), seed ^ 0xabc));
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

fn loss_value(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let l = f(&mut tape, &vars).unwrap();
    tape.value(l).data()[0]
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every coordinate of every input.
pub fn max_grad_error(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let l = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(l).unwrap().collect(&vars);
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_value(&work, f);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_value(&work, f);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g.data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

pub type Case = (&'static str, Box<dyn Fn() -> f64>);

fn case(name: &'static str, f: impl Fn() -> f64 + 'static) -> Case {
    (name, Box::new(f))
}

fn op1(seed: u64, shape: &'static [usize], g: fn(&mut Tape, Var) -> Result<Var>) -> impl Fn() -> f64 {
    move || {
        max_grad_error(&[random(shape, seed)], &|t, v| {
            let o = g(t, v[0])?;
            weighted_sum(t, o, seed)
        })
    }
}

fn op1_kinked(seed: u64, shape: &'static [usize], g: fn(&mut Tape, Var) -> Result<Var>) -> impl Fn() -> f64 {
    move || {
        max_grad_error(&[random_away_from_zero(shape, seed)], &|t, v| {
            let o = g(t, v[0])?;
            weighted_sum(t, o, seed)
        })
    }
}

fn op2(
    seed: u64,
    a: &'static [usize],
    b: &'static [usize],
    g: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> impl Fn() -> f64 {
    move || {
        max_grad_error(&[random(a, seed), random(b, seed + 1)], &|t, v| {
            let o = g(t, v[0], v[1])?;
            weighted_sum(t, o, seed)
        })
    }
}

/// Replaces every parameter with a seeded random draw, so zero-initialized
/// heads do not hide the rest of the network from the check.
fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        *t = random(t.shape(), seed + i as u64).map(|v| v * scale);
    }
}

fn small_denoiser() -> TransformerDenoiser {
    let cfg = TransformerDenoiserConfig {
        encoder: EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ff_width: 12,
        },
        time_dim: 8,
    };
    let mut m = TransformerDenoiser::new(&cfg, 3, 2, 100, 5).unwrap();
    randomize(m.store_mut(), 31, 0.4);
    m
}

fn small_baseline(kind: BaselineKind) -> Baseline {
    let cfg = match kind {
        BaselineKind::Cnn1d => BaselineConfig {
            hidden: 4,
            depth: 3,
            kernel: 3,
            ..BaselineConfig::default_for(kind)
        },
        BaselineKind::Lstm => BaselineConfig {
            hidden: 3,
            depth: 2,
            ..BaselineConfig::default_for(kind)
        },
        BaselineKind::Transformer => BaselineConfig {
            hidden: 8,
            depth: 2,
            n_heads: 2,
            ff_width: 12,
            ..BaselineConfig::default_for(kind)
        },
    };
    let mut m = Baseline::new(&cfg, 3, 2, 9).unwrap();
    randomize(m.store_mut(), 77, 0.5);
    m
}

fn denoiser_case() -> f64 {
    let m = small_denoiser();
    let x = random(&[16, 3], 1);
    let y = random(&[16, 2], 2);
    max_grad_error(m.params().tensors(), &|t, p| {
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let e = m.predict_noise(t, p, xv, &[4, 93], yv, 8)?;
        let sq = t.mul(e, e)?;
        t.sum(sq)
    })
}

fn baseline_case(kind: BaselineKind) -> f64 {
    let m = small_baseline(kind);
    let y = random(&[12, 2], 3);
    max_grad_error(m.params().tensors(), &|t, p| {
        let yv = t.constant(y.clone());
        let o = m.forward(t, p, yv, 6)?;
        weighted_sum(t, o, 4)
    })
}

/// Two-layer stub `ε_θ = W₂·tanh(W₁·[x_t, y] + b₁)` for the objective check.
struct Stub {
    store: ParamStore,
}

impl NoisePredictor for Stub {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn predict_noise(&self, t: &mut Tape, p: &[Var], x: Var, _: &[usize], y: Var, _: usize) -> Result<Var> {
        let h = t.concat(&[x, y], 1)?;
        let h = t.matmul(h, p[0])?;
        let h = t.add_row(h, p[1])?;
        let h = t.tanh(h)?;
        t.matmul(h, p[2])
    }
}

fn diffusion_loss_case() -> f64 {
    let mut store = ParamStore::new();
    store.push("w1", random(&[5, 6], 10));
    store.push("b1", random(&[6], 11));
    store.push("w2", random(&[6, 3], 12));
    let stub = Stub { store };
    let sched = build_schedule(&DiffusionConfig::default()).unwrap();
    let x0 = random(&[8, 3], 13);
    let y = random(&[8, 2], 14);
    let eps = random(&[8, 3], 15);
    max_grad_error(stub.params().tensors(), &|t, p| {
        Ok(noise_loss(t, p, &stub, &x0, &y, 4, &sched, &[7, 60], &eps)?.loss)
    })
}

fn mlp_case() -> f64 {
    let inputs = [random(&[5, 4], 20), random(&[4, 6], 21), random(&[6], 22), random(&[6, 2], 23), random(&[2], 24)];
    max_grad_error(&inputs, &|t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let h = t.gelu(h)?;
        let o = t.matmul(h, v[3])?;
        let o = t.add_row(o, v[4])?;
        let o = t.softmax(o, 1)?;
        weighted_sum(t, o, 25)
    })
}

/// Every differentiable operation plus the four architectures, the
/// diffusion objective and a two-layer network.
pub fn gradient_cases() -> Vec<Case> {
    vec![
        case("add", op2(1, &[3, 4], &[3, 4], |t, a, b| t.add(a, b))),
        case("sub", op2(2, &[3, 4], &[3, 4], |t, a, b| t.sub(a, b))),
        case("mul", op2(3, &[3, 4], &[3, 4], |t, a, b| t.mul(a, b))),
        case("scale", op1(4, &[2, 5], |t, a| t.scale(a, -1.7))),
        case("add_row", op2(5, &[4, 3], &[3], |t, a, b| t.add_row(a, b))),
        case("mul_row", op2(6, &[4, 3], &[3], |t, a, b| t.mul_row(a, b))),
        case("matmul", op2(7, &[3, 4], &[4, 5], |t, a, b| t.matmul(a, b))),
        case("matmul_ta", op2(8, &[4, 3], &[4, 5], |t, a, b| t.matmul_t(a, b, true, false))),
        case("matmul_tb", op2(9, &[3, 4], &[5, 4], |t, a, b| t.matmul_t(a, b, false, true))),
        case("matmul_tab", op2(10, &[4, 3], &[5, 4], |t, a, b| t.matmul_t(a, b, true, true))),
        case("transpose", op1(11, &[3, 5], |t, a| t.transpose(a))),
        case("reshape", op1(12, &[3, 4], |t, a| t.reshape(a, &[6, 2]))),
        case("concat_rows", op2(13, &[2, 3], &[4, 3], |t, a, b| t.concat(&[a, b], 0))),
        case("concat_cols", op2(14, &[3, 2], &[3, 4], |t, a, b| t.concat(&[a, b, a], 1))),
        case("slice_rows", op1(15, &[5, 3], |t, a| t.slice(a, 0, 1, 3))),
        case("slice_cols", op1(16, &[3, 5], |t, a| t.slice(a, 1, 2, 2))),
        case("gather_rows", op1(17, &[4, 3], |t, a| t.gather_rows(a, &[3, 0, 3, 1]))),
        case("sum", op1(18, &[3, 3], |t, a| {
            let s = t.sum(a)?;
            t.mul(s, s)
        })),
        case("mean", op1(19, &[3, 3], |t, a| {
            let s = t.mean(a)?;
            t.mul(s, s)
        })),
        case("sum_axis0", op1(20, &[3, 4], |t, a| t.sum_axis(a, 0))),
        case("mean_axis1", op1(21, &[3, 4], |t, a| t.mean_axis(a, 1))),
        case("relu", op1_kinked(22, &[4, 4], |t, a| t.relu(a))),
        case("gelu", op1(23, &[4, 4], |t, a| t.gelu(a))),
        case("tanh", op1(24, &[4, 4], |t, a| t.tanh(a))),
        case("sigmoid", op1(25, &[4, 4], |t, a| t.sigmoid(a))),
        case("softmax_axis0", op1(26, &[4, 3], |t, a| t.softmax(a, 0))),
        case("softmax_axis1", op1(27, &[4, 3], |t, a| t.softmax(a, 1))),
        case("layer_norm_axis1", op1(28, &[4, 5], |t, a| t.layer_norm(a, 1, 1e-5))),
        case("layer_norm_axis0", op1(29, &[5, 3], |t, a| t.layer_norm(a, 0, 1e-5))),
        case("attention", op1(30, &[8, 12], |t, a| t.attention(a, 4, 2))),
        case("conv1d", op2(31, &[10, 3], &[9, 4], |t, a, b| t.conv1d(a, b, 5, 3))),
        case("mlp_two_layer", mlp_case),
        case("diffusion_objective", diffusion_loss_case),
        case("transformer_denoiser", denoiser_case),
        case("cnn1d", || baseline_case(BaselineKind::Cnn1d)),
        case("lstm", || baseline_case(BaselineKind::Lstm)),
        case("transformer_regressor", || baseline_case(BaselineKind::Transformer)),
    ]
}

pub mod checks;
