use crate::action::ActionChunk;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

use super::VelocityModel;

/// Exact velocity field for Gaussian data `a ~ N(m, C)` and noise
/// `ε ~ N(0, S)`.
///
/// Since `x_t` and `ε − a` are jointly Gaussian, the regression target has
/// the closed form
/// `E[ε − a | x_t = x] = (tS − (1−t)C) P⁻¹ (x − (1−t)m) − m`
/// with `P = t²S + (1−t)²C`.
#[derive(Clone, Debug)]
pub struct GaussianOracleModel<T> {
    pub horizon: usize,
    pub dim: usize,
    pub mean: Vec<T>,
    pub target_cov: Matrix<T>,
    pub noise_cov: Matrix<T>,
}

impl<T: Real> GaussianOracleModel<T> {
    pub fn new(horizon: usize, dim: usize, mean: Vec<T>, target_cov: Matrix<T>, noise_cov: Matrix<T>) -> Result<Self> {
        let n = horizon * dim;
        if mean.len() != n || target_cov.shape() != (n, n) || noise_cov.shape() != (n, n) {
            return Err(Error::Layout(format!("oracle moments do not match a {horizon}x{dim} chunk")));
        }
        target_cov.cholesky()?;
        noise_cov.cholesky()?;
        Ok(Self { horizon, dim, mean, target_cov, noise_cov })
    }

    pub fn velocity(&self, x: &[T], t: T) -> Result<Vec<T>> {
        let n = self.mean.len();
        if x.len() != n {
            return Err(Error::Layout(format!("state of length {} for {n}-dim oracle", x.len())));
        }
        let s = t;
        let c = T::one() - t;
        let p = Matrix::from_fn(n, n, |i, j| s * s * self.noise_cov[(i, j)] + c * c * self.target_cov[(i, j)]);
        let l = p.cholesky().map_err(|e| Error::Numerical {
            step: 0,
            message: format!("oracle precision at t={t}: {e}"),
        })?;
        let r: Vec<T> = x.iter().zip(&self.mean).map(|(&xi, &mi)| xi - c * mi).collect();
        let y = l.cholesky_solve(&r);
        let gain = Matrix::from_fn(n, n, |i, j| s * self.noise_cov[(i, j)] - c * self.target_cov[(i, j)]);
        let mut v = gain.matvec(&y)?;
        for (vi, &mi) in v.iter_mut().zip(&self.mean) {
            *vi -= mi;
        }
        Ok(v)
    }
}

impl<T: Real> VelocityModel<T> for GaussianOracleModel<T> {
    fn predict(&self, x: &ActionChunk<T>, t: T, _context: &[T]) -> Result<ActionChunk<T>> {
        let v = self.velocity(x.flat(), t)?;
        ActionChunk::from_flat(self.horizon, self.dim, v)
    }
}
