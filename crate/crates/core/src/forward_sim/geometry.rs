use crate::error::{Error, Result};
use crate::inverse::svd;
use crate::numeric::Tensor;
use crate::rng;

pub type Point = [f64; 3];

pub const HEART_RADIUS: f64 = 1.0;
pub const TORSO_RADIUS: f64 = 3.0;
/// Standard deviation of the per-coordinate torso electrode jitter.
pub const TORSO_JITTER: f64 = 0.1;

/// Linear map from heart-surface to torso-surface potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferOperator {
    /// `n_b × n_h` gain matrix.
    pub matrix: Tensor,
    pub heart_positions: Vec<Point>,
    pub torso_positions: Vec<Point>,
}

/// Quasi-uniform points on a sphere (golden-angle spiral).
pub fn fibonacci_sphere(n: usize, radius: f64) -> Vec<Point> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [radius * r * phi.cos(), radius * r * phi.sin(), radius * z]
        })
        .collect()
}

pub fn distance_sq(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Great-circle distance between two points on a sphere centred at the origin.
pub fn geodesic(a: &Point, b: &Point) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = (0..3).map(|k| a[k] * b[k]).sum::<f64>() / (na * nb);
    0.5 * (na + nb) * cos.clamp(-1.0, 1.0).acos()
}

/// Inverse-square kernel with the gain normalized so rows sum to one on
/// average. Returns the matrix and the normalization constant.
pub fn inverse_square_kernel(torso: &[Point], heart: &[Point]) -> Result<(Tensor, f64)> {
    if torso.is_empty() || heart.is_empty() {
        return Err(Error::Contract("kernel needs at least one point on each surface".into()));
    }
    let raw = Tensor::from_fn2(torso.len(), heart.len(), |i, j| {
        1.0 / distance_sq(&torso[i], &heart[j])
    });
    let mean_row_sum = raw.sum() / torso.len() as f64;
    let c = 1.0 / mean_row_sum;
    let a = raw.map(|v| v * c);
    a.ensure_finite("transfer kernel")?;
    Ok((a, c))
}

impl TransferOperator {
    pub fn from_positions(heart: Vec<Point>, torso: Vec<Point>) -> Result<Self> {
        let (matrix, _) = inverse_square_kernel(&torso, &heart)?;
        Ok(Self {
            matrix,
            heart_positions: heart,
            torso_positions: torso,
        })
    }

    pub fn n_b(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_h(&self) -> usize {
        self.matrix.cols()
    }

    /// Ratio of the largest to the smallest singular value.
    pub fn condition_number(&self) -> Result<f64> {
        let f = svd::svd(&self.matrix)?;
        let full = self.n_b().min(self.n_h());
        if f.rank() < full {
            return Ok(f64::INFINITY);
        }
        Ok(f.sigma[0] / f.sigma[f.rank() - 1])
    }
}

/// Heart nodes on the unit sphere, torso electrodes on a concentric sphere
/// of radius 3 with seeded Gaussian jitter.
pub fn synth_transfer_matrix(n_b: usize, n_h: usize, seed: u64) -> Result<TransferOperator> {
    if n_b == 0 || n_h == 0 {
        return Err(Error::Config(format!("invalid electrode counts n_b={n_b}, n_h={n_h}")));
    }
    let heart = fibonacci_sphere(n_h, HEART_RADIUS);
    let mut r = rng::stream(seed, &[0x7042]);
    let torso = fibonacci_sphere(n_b, TORSO_RADIUS)
        .into_iter()
        .map(|p| {
            let mut q = p;
            for v in &mut q {
                *v += TORSO_JITTER * rng::normal(&mut r);
            }
            q
        })
        .collect();
    TransferOperator::from_positions(heart, torso)
}

/// Undirected k-nearest-neighbour edges `(i, j)` with `i < j`, sorted.
pub fn knn_edges(points: &[Point], k: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| (distance_sq(p, q), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            edges.push((i.min(j), i.max(j)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}
