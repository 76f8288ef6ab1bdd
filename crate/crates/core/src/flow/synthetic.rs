//! Linear-Gaussian chunk data with known structure.

use rand::Rng;

use crate::action::{ActionChunk, ActionLayout};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::rng::standard_normal;

use super::train::Example;

/// Chunks `a = B c + L z` for a Gaussian context `c` and white `z`.
///
/// `B` varies smoothly along the horizon and the residual covariance
/// `L Lᵀ` is a squared-exponential kernel over rows, shared across
/// dimensions, so neighbouring rows are strongly correlated.
#[derive(Clone, Debug)]
pub struct LinearGaussian {
    pub layout: ActionLayout,
    pub context_dim: usize,
    pub readout: Matrix<f64>,
    pub residual: Matrix<f64>,
    chol: Matrix<f64>,
}

impl LinearGaussian {
    pub fn new<R: Rng + ?Sized>(horizon: usize, dim: usize, context_dim: usize, length_scale: f64, noise_scale: f64, rng: &mut R) -> Result<Self> {
        let layout = ActionLayout::new(horizon, dim, vec![], vec![], 10.0)?;
        let n = horizon * dim;
        // Each (dimension, context) pair gets a random line along the horizon.
        let coef: Vec<[f64; 2]> = (0..dim * context_dim).map(|_| [standard_normal(rng), standard_normal(rng)]).collect();
        let readout = Matrix::from_fn(n, context_dim, |i, k| {
            let (h, d) = (i / dim, i % dim);
            let s = h as f64 / (horizon.max(2) - 1) as f64;
            let [a, b] = coef[d * context_dim + k];
            (a + b * s) / (context_dim as f64).sqrt()
        });
        let residual = Matrix::from_fn(n, n, |i, j| {
            if i % dim != j % dim {
                return if i == j { 1.0 } else { 0.0 };
            }
            let gap = (i / dim) as f64 - (j / dim) as f64;
            let k = noise_scale * noise_scale * (-gap * gap / (2.0 * length_scale * length_scale)).exp();
            if i == j { k + 1e-4 } else { k }
        });
        let chol = residual.cholesky()?;
        Ok(Self { layout, context_dim, readout, residual, chol })
    }

    pub fn mean(&self, context: &[f64]) -> Result<Vec<f64>> {
        self.readout.matvec(context)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Example<f64>>> {
        let len = self.layout.flat_len();
        (0..n)
            .map(|_| {
                let context: Vec<f64> = (0..self.context_dim).map(|_| standard_normal(rng)).collect();
                let z: Vec<f64> = (0..len).map(|_| standard_normal(rng)).collect();
                let mut flat = self.mean(&context)?;
                for (f, e) in flat.iter_mut().zip(self.chol.matvec(&z)?) {
                    *f += e;
                }
                Ok(Example { chunk: ActionChunk::from_flat(self.layout.horizon, self.layout.dim, flat)?, context })
            })
            .collect()
    }
}
