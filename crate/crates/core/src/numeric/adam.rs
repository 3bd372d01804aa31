use super::tensor::Tensor;
use crate::error::{dim_err, Result};

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Standard moment decay rates (0.9, 0.999) and stabilizer 1e-8.
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update in place and advances the step counter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(dim_err("adam_step", &[params.len()], &[grads.len(), self.m.len()]));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(dim_err("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, 0.7, -42.0] {
            let mut p = vec![Tensor::scalar(1.0)];
            let mut adam = AdamState::new(0.01, &p);
            adam.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let moved = (p[0].data()[0] - 1.0).abs();
            assert!((moved - 0.01).abs() < 1e-7, "g={g} moved {moved}");
            assert_eq!(adam.step_count(), 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![Tensor::scalar(3.0)];
        let mut adam = AdamState::new(0.1, &p);
        adam.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        let before = p[0].clone();
        let (m1, v1) = (adam.first_moments()[0].data()[0], adam.second_moments()[0].data()[0]);
        adam.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert!((adam.first_moments()[0].data()[0] - 0.9 * m1).abs() < 1e-15);
        assert!((adam.second_moments()[0].data()[0] - 0.999 * v1).abs() < 1e-15);
        // the decayed first moment still pushes, but a fresh zero-grad state does not
        let mut fresh = vec![before.clone()];
        let mut idle = AdamState::new(0.1, &fresh);
        idle.step(&mut fresh, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(fresh[0], before);
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut w = vec![Tensor::scalar(0.0)];
        let mut adam = AdamState::new(0.1, &w);
        for _ in 0..200 {
            let g = 2.0 * (w[0].data()[0] - 5.0);
            adam.step(&mut w, &[Tensor::scalar(g)]).unwrap();
        }
        assert!((w[0].data()[0] - 5.0).abs() < 0.05, "w = {}", w[0].data()[0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut adam = AdamState::new(0.1, &p);
        assert!(adam.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }
}
