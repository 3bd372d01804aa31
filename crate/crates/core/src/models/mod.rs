//! The transformer noise predictor and the three regression baselines.
//!
//! Every network consumes token-major batches: one row per time sample, so a
//! batch of `B` signals of length `T` is a `(B·T)×channels` matrix. Use
//! [`to_tokens`] and [`from_tokens`] to move between that layout and the
//! `channels×T` signal matrices of the dataset.

mod baselines;
mod denoiser;
mod layers;

pub use baselines::{check_capacity, Baseline, BaselineConfig, BaselineKind, CAPACITY_TOLERANCE};
pub use denoiser::{TransformerDenoiser, TransformerDenoiserConfig};
pub use layers::EncoderConfig;

use crate::error::{dim_err, Result};
use crate::numeric::Tensor;

/// Stacks `channels×T` signals into a `(B·T)×channels` token matrix.
pub fn to_tokens(signals: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = signals.first() else {
        return Ok(Tensor::zeros(&[0, 0]));
    };
    let (c, t) = (first.rows(), first.cols());
    let mut data = Vec::with_capacity(signals.len() * c * t);
    for s in signals {
        if s.shape() != [c, t] {
            return Err(dim_err("to_tokens", first.shape(), s.shape()));
        }
        for j in 0..t {
            data.extend((0..c).map(|i| s.at(i, j)));
        }
    }
    Tensor::new(vec![signals.len() * t, c], data)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: &Tensor, seq: usize) -> Result<Vec<Tensor>> {
    if seq == 0 || tokens.rank() != 2 || !tokens.rows().is_multiple_of(seq) {
        return Err(dim_err("from_tokens", tokens.shape(), &[seq]));
    }
    let c = tokens.cols();
    Ok(tokens
        .data()
        .chunks_exact(seq * c)
        .map(|block| Tensor::from_fn2(c, seq, |i, j| block[j * c + i]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoisePredictor;
    use crate::numeric::Tape;

    #[test]
    fn token_round_trip() {
        let a = Tensor::from_fn2(3, 5, |i, j| (i * 10 + j) as f64);
        let b = a.map(|v| -v);
        let tok = to_tokens(&[&a, &b]).unwrap();
        assert_eq!(tok.shape(), &[10, 3]);
        assert_eq!(tok.row(6), &[-1.0, -11.0, -21.0]);
        assert_eq!(from_tokens(&tok, 5).unwrap(), vec![a, b]);
    }

    #[test]
    fn desk_parameter_counts_are_matched() {
        let cfgs: Vec<_> = BaselineKind::ALL.iter().map(|&k| BaselineConfig::default_for(k)).collect();
        let counts = check_capacity(&cfgs, 24, 12).unwrap();
        assert_eq!(counts, vec![68224, 66744, 69464]);
    }

    #[test]
    fn mismatched_capacity_rejected() {
        let mut cfgs: Vec<_> = BaselineKind::ALL.iter().map(|&k| BaselineConfig::default_for(k)).collect();
        cfgs[0].hidden = 300;
        assert!(check_capacity(&cfgs, 24, 12).is_err());
    }

    #[test]
    fn zero_head_denoiser_outputs_zero() {
        let m = TransformerDenoiser::new(&TransformerDenoiserConfig::default(), 5, 3, 100, 1).unwrap();
        let mut tape = Tape::new();
        let p = m.params().bind(&mut tape);
        let x = tape.constant(Tensor::from_fn2(16, 5, |i, j| (i + j) as f64 * 0.1));
        let y = tape.constant(Tensor::from_fn2(16, 3, |i, j| (i * j) as f64 * 0.01));
        let e = m.predict_noise(&mut tape, &p, x, &[1, 77], y, 8).unwrap();
        assert_eq!(tape.shape(e), &[16, 5]);
        assert!(tape.value(e).data().iter().all(|v| *v == 0.0));
        assert!(m.predict_noise(&mut tape, &p, x, &[0, 1], y, 8).is_err());
        assert!(m.predict_noise(&mut tape, &p, x, &[1], y, 8).is_err());
    }

    #[test]
    fn baseline_shapes() {
        for kind in BaselineKind::ALL {
            let m = Baseline::new(&BaselineConfig::default_for(kind), 7, 4, 3).unwrap();
            let mut tape = Tape::new();
            let p = m.params().bind(&mut tape);
            let y = tape.constant(Tensor::from_fn2(3 * 9, 4, |i, j| ((i * 4 + j) as f64).sin()));
            let out = m.forward(&mut tape, &p, y, 9).unwrap();
            assert_eq!(tape.shape(out), &[27, 7], "{kind:?}");
            let bad = tape.constant(Tensor::zeros(&[27, 5]));
            assert!(m.forward(&mut tape, &p, bad, 9).is_err());
        }
    }

    #[test]
    fn lstm_sequences_are_independent() {
        let m = Baseline::new(&BaselineConfig::default_for(BaselineKind::Lstm), 3, 2, 3).unwrap();
        let run = |y: Tensor| {
            let mut tape = Tape::new();
            let p = m.params().bind_frozen(&mut tape);
            let y = tape.constant(y);
            let o = m.forward(&mut tape, &p, y, 4).unwrap();
            tape.value(o).clone()
        };
        let a = Tensor::from_fn2(4, 2, |i, j| (i + 2 * j) as f64 * 0.3);
        let b = Tensor::from_fn2(4, 2, |i, j| (i * j) as f64 - 1.0);
        let both = run(Tensor::new(vec![8, 2], [a.data(), b.data()].concat()).unwrap());
        assert_eq!(&both.data()[..12], run(a).data());
        assert_eq!(&both.data()[12..], run(b).data());
    }
}
