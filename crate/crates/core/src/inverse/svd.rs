//! One-sided Jacobi SVD for small dense matrices.
//!
//! Columns of a working copy are orthogonalized by plane rotations, which are
//! accumulated into `V`. At convergence the column norms are the singular
//! values and the normalized columns are the left singular vectors. Wide
//! matrices are handled through their transpose.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `A = U·diag(σ)·Vᵀ` restricted to the numerically nonzero
/// singular values, which are sorted in decreasing order.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// `m × r`.
    pub u: Tensor,
    pub sigma: Vec<f64>,
    /// `n × r`.
    pub v: Tensor,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U·diag(σ)·Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let (m, n, r) = (self.u.rows(), self.v.rows(), self.rank());
        Tensor::from_fn2(m, n, |i, j| {
            (0..r).map(|k| self.u.at(i, k) * self.sigma[k] * self.v.at(j, k)).sum()
        })
    }
}

pub fn svd(a: &Tensor) -> Result<SvdFactors> {
    if a.rank() != 2 {
        return Err(Error::Contract(format!("svd needs a matrix, got shape {:?}", a.shape())));
    }
    a.ensure_finite("svd")?;
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        let f = jacobi_tall(&a.transpose()?)?;
        return Ok(SvdFactors {
            u: f.v,
            sigma: f.sigma,
            v: f.u,
        });
    }
    jacobi_tall(a)
}

fn jacobi_tall(a: &Tensor) -> Result<SvdFactors> {
    let (m, n) = (a.rows(), a.cols());
    // column-major working copies
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = f64::EPSILON * m as f64;
    let mut converged = false;
    let mut off = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(cosine);
                if cosine <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (off-diagonal cosine {off:e})"
        )));
    }

    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * f64::EPSILON * m.max(n) as f64;
    let kept: Vec<usize> = order.into_iter().filter(|&j| norms[j] > cutoff).collect();
    let r = kept.len();
    let u = Tensor::from_fn2(m, r, |i, k| w[kept[k]][i] / norms[kept[k]]);
    let vt = Tensor::from_fn2(n, r, |i, k| v[kept[k]][i]);
    Ok(SvdFactors {
        u,
        sigma: kept.iter().map(|&j| norms[j]).collect(),
        v: vt,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}
