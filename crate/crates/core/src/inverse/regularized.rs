//! Tikhonov and truncated-SVD reconstructions, applied one time sample at a
//! time with the factorization shared across the beat.

use serde::{Deserialize, Serialize};

use super::svd::{svd, SvdFactors};
use crate::error::{dim_err, Error, Result};
use crate::forward_sim::geometry::{knn_edges, Point};
use crate::forward_sim::{BodySurfaceRecord, EpicardialBeat, Pair, TransferOperator};
use crate::numeric::tensor::dot;
use crate::numeric::Tensor;

/// Neighbours per heart node in the first-difference graph.
pub const GRAPH_NEIGHBOURS: usize = 4;

/// λ values tried when no λ is given.
pub const LAMBDA_GRID: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegOperator {
    Identity,
    /// Differences across the edges of the k-nearest-neighbour heart graph.
    FirstDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationConfig {
    pub lambda: f64,
    pub operator: RegOperator,
    /// When set, solve by truncated SVD with this rank instead of Tikhonov.
    pub truncation_rank: Option<usize>,
}

impl RegularizationConfig {
    pub fn tikhonov(lambda: f64, operator: RegOperator) -> Self {
        Self {
            lambda,
            operator,
            truncation_rank: None,
        }
    }

    pub fn tsvd(rank: usize) -> Self {
        Self {
            lambda: 0.0,
            operator: RegOperator::Identity,
            truncation_rank: Some(rank),
        }
    }

    pub fn validate(&self, a: &Tensor) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if let Some(k) = self.truncation_rank {
            let max = a.rows().min(a.cols());
            if k == 0 || k > max {
                return Err(Error::Contract(format!("truncation rank {k} outside 1..={max}")));
            }
        }
        Ok(())
    }
}

/// Edge-node incidence matrix of the heart graph: row `e` is `e_i − e_j`.
pub fn first_difference_operator(points: &[Point], k: usize) -> Tensor {
    let edges = knn_edges(points, k);
    let mut g = Tensor::zeros(&[edges.len(), points.len()]);
    for (e, &(i, j)) in edges.iter().enumerate() {
        g.set(e, i, 1.0);
        g.set(e, j, -1.0);
    }
    g
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(dim_err("cholesky", a.shape(), &[n, n]));
    }
    let scale = (0..n).map(|i| a.at(i, i).abs()).fold(0.0, f64::max);
    let floor = scale * f64::EPSILON * n as f64;
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let s: f64 = (0..j).map(|k| l.at(j, k).powi(2)).sum();
        let pivot = a.at(j, j) - s;
        if !(pivot > floor) {
            return Err(Error::Regularization { pivot: j, value: pivot });
        }
        let d = pivot.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let s: f64 = (0..j).map(|k| l.at(i, k) * l.at(j, k)).sum();
            l.set(i, j, (a.at(i, j) - s) / d);
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l.at(i, k) * z[k]).sum();
        z[i] = (b[i] - s) / l.at(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l.at(k, i) * x[k]).sum();
        x[i] = (z[i] - s) / l.at(i, i);
    }
    x
}

/// Prepared Tikhonov solver for `(AᵀA + λ²ΓᵀΓ) x = Aᵀy`.
pub struct TikhonovSolver {
    a: Tensor,
    chol: Tensor,
}

impl TikhonovSolver {
    pub fn new(a: &Tensor, lambda: f64, gamma: Option<&Tensor>) -> Result<Self> {
        let n = a.cols();
        let at = a.transpose()?;
        let mut normal = at.matmul(a)?;
        let l2 = lambda * lambda;
        match gamma {
            None => {
                for i in 0..n {
                    normal.set(i, i, normal.at(i, i) + l2);
                }
            }
            Some(g) => {
                if g.cols() != n {
                    return Err(dim_err("tikhonov", a.shape(), g.shape()));
                }
                let gtg = g.transpose()?.matmul(g)?;
                for (x, r) in normal.data_mut().iter_mut().zip(gtg.data()) {
                    *x += l2 * r;
                }
            }
        }
        Ok(Self {
            a: a.clone(),
            chol: cholesky(&normal)?,
        })
    }

    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.a.rows() {
            return Err(dim_err("tikhonov_solve", self.a.shape(), &[y.len()]));
        }
        let aty: Vec<f64> = (0..self.a.cols())
            .map(|j| (0..self.a.rows()).map(|i| self.a.at(i, j) * y[i]).sum())
            .collect();
        Ok(cholesky_solve(&self.chol, &aty))
    }
}

/// Single-column Tikhonov solve; `gamma = None` means Γ = I.
pub fn tikhonov_solve(a: &Tensor, y: &[f64], lambda: f64, gamma: Option<&Tensor>) -> Result<Vec<f64>> {
    TikhonovSolver::new(a, lambda, gamma)?.solve(y)
}

/// `Σ_{i≤k} (u_iᵀy / σ_i) v_i`.
pub fn tsvd_solve(factors: &SvdFactors, y: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > factors.rank() {
        return Err(Error::Contract(format!("truncation rank {k} outside 1..={}", factors.rank())));
    }
    if y.len() != factors.u.rows() {
        return Err(dim_err("tsvd_solve", factors.u.shape(), &[y.len()]));
    }
    let n = factors.v.rows();
    let mut x = vec![0.0; n];
    for i in 0..k {
        let ui = factors.u.column(i);
        let coef = dot(&ui, y) / factors.sigma[i];
        for (j, xj) in x.iter_mut().enumerate() {
            *xj += coef * factors.v.at(j, i);
        }
    }
    Ok(x)
}

enum ColumnSolver {
    Tikhonov(TikhonovSolver),
    Tsvd(SvdFactors, usize),
}

impl ColumnSolver {
    fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Tikhonov(s) => s.solve(y),
            Self::Tsvd(f, k) => tsvd_solve(f, y, *k),
        }
    }
}

/// Reconstructs a whole beat column by column with one shared factorization.
pub fn solve_beat(op: &TransferOperator, y: &BodySurfaceRecord, cfg: &RegularizationConfig) -> Result<Tensor> {
    cfg.validate(&op.matrix)?;
    let yp = &y.potentials;
    if yp.rows() != op.n_b() {
        return Err(dim_err("solve_beat", op.matrix.shape(), yp.shape()));
    }
    let solver = match cfg.truncation_rank {
        Some(k) => {
            let f = svd(&op.matrix)?;
            if k > f.rank() {
                return Err(Error::Contract(format!("truncation rank {k} exceeds numerical rank {}", f.rank())));
            }
            ColumnSolver::Tsvd(f, k)
        }
        None => {
            let gamma = match cfg.operator {
                RegOperator::Identity => None,
                RegOperator::FirstDifference => {
                    Some(first_difference_operator(&op.heart_positions, GRAPH_NEIGHBOURS))
                }
            };
            ColumnSolver::Tikhonov(TikhonovSolver::new(&op.matrix, cfg.lambda, gamma.as_ref())?)
        }
    };
    let t = yp.cols();
    let mut x = Tensor::zeros(&[op.n_h(), t]);
    for col in 0..t {
        let xc = solver.solve(&yp.column(col))?;
        for (j, v) in xc.into_iter().enumerate() {
            x.set(j, col, v);
        }
    }
    x.ensure_finite("solve_beat")?;
    Ok(x)
}

/// Wraps a reconstruction as a beat carrying the source labels.
pub fn estimate_as_beat(source: &EpicardialBeat, potentials: Tensor) -> EpicardialBeat {
    EpicardialBeat {
        potentials,
        pacing_site: source.pacing_site,
        heart_id: source.heart_id,
        truncated: source.truncated,
    }
}

/// Picks the λ from `grid` with the lowest mean squared reconstruction error
/// over `pairs`, using each pair's own heart operator. Ties keep the earlier
/// grid entry. Returns `(λ, mse)`.
pub fn select_lambda(
    pairs: &[Pair],
    operator_of: impl Fn(u32) -> Option<TransferOperator>,
    kind: RegOperator,
    grid: &[f64],
) -> Result<(f64, f64)> {
    if pairs.is_empty() || grid.is_empty() {
        return Err(Error::Contract("lambda selection needs pairs and a non-empty grid".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let cfg = RegularizationConfig::tikhonov(lambda, kind);
        let (mut se, mut n) = (0.0, 0usize);
        for p in pairs {
            let op = operator_of(p.beat.heart_id)
                .ok_or_else(|| Error::Config(format!("no transfer operator for heart {}", p.beat.heart_id)))?;
            let x = solve_beat(&op, &p.record, &cfg)?;
            se += x
                .data()
                .iter()
                .zip(p.beat.potentials.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
            n += x.len();
        }
        let mse = se / n as f64;
        if best.is_none_or(|(_, m)| mse < m) {
            best = Some((lambda, mse));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Total squared first difference across the heart graph, summed over time.
pub fn graph_roughness(x: &Tensor, points: &[Point]) -> f64 {
    let edges = knn_edges(points, GRAPH_NEIGHBOURS);
    edges
        .iter()
        .map(|&(i, j)| {
            x.row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum()
}
