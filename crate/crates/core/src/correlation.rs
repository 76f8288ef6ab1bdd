//! Flattened action covariance, shrinkage, correlated sampling and the
//! conditional-Gaussian correction used by inpainting.

use rand::Rng;

use crate::action::{ActionChunk, ActionLayout};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::standard_normal;
use crate::scalar::Real;

pub const DEFAULT_BETA: f64 = 0.5;

/// Streaming sum of `vec(a) vec(a)ᵀ` in 64-bit reals.
///
/// Only the lower triangle is accumulated. Partial accumulators from shards
/// combine with [`merge`](Self::merge).
#[derive(Clone, Debug)]
pub struct CovarianceAccumulator {
    n: usize,
    count: u64,
    lower: Vec<f64>,
}

impl CovarianceAccumulator {
    pub fn new(n: usize) -> Self {
        Self { n, count: 0, lower: vec![0.0; n * (n + 1) / 2] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push<T: Real>(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.n {
            return Err(Error::Layout(format!("vector of length {} pushed into {}-dim accumulator", v.len(), self.n)));
        }
        let x: Vec<f64> = v.iter().map(|a| a.as_f64()).collect();
        let mut k = 0;
        for i in 0..self.n {
            let xi = x[i];
            let row = &mut self.lower[k..k + i + 1];
            for (r, &xj) in row.iter_mut().zip(&x[..=i]) {
                *r += xi * xj;
            }
            k += i + 1;
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Layout("merging accumulators of different size".into()));
        }
        for (a, b) in self.lower.iter_mut().zip(&other.lower) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    /// `(1/N) Σ vec(a) vec(a)ᵀ`, symmetric by construction.
    pub fn finish(&self) -> Result<Matrix<f64>> {
        if self.count == 0 {
            return Err(Error::Estimation("covariance of zero samples".into()));
        }
        let inv = 1.0 / self.count as f64;
        let mut out = Matrix::zeros(self.n, self.n);
        let mut k = 0;
        for i in 0..self.n {
            for j in 0..=i {
                let v = self.lower[k] * inv;
                out[(i, j)] = v;
                out[(j, i)] = v;
                k += 1;
            }
        }
        Ok(out)
    }
}

/// Uncentered sample covariance of already-normalized chunks.
pub fn estimate_covariance<T: Real>(chunks: &[ActionChunk<T>]) -> Result<Matrix<f64>> {
    let first = chunks.first().ok_or_else(|| Error::Estimation("covariance of zero chunks".into()))?;
    let mut acc = CovarianceAccumulator::new(first.flat().len());
    for c in chunks {
        acc.push(c.flat())?;
    }
    acc.finish()
}

/// `β Σ + (1 − β) I`
pub fn shrink<T: Real>(sigma: &Matrix<T>, beta: f64) -> Result<Matrix<T>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("shrinkage beta {beta} outside [0, 1]")));
    }
    if !sigma.is_square() {
        return Err(Error::Layout(format!("shrinking non-square {:?}", sigma.shape())));
    }
    let b = T::lit(beta);
    let mut out = sigma.scale(b);
    for i in 0..out.rows() {
        out[(i, i)] += T::one() - b;
    }
    Ok(out)
}

pub fn factorize<T: Real>(sigma_reg: &Matrix<T>) -> Result<Matrix<T>> {
    sigma_reg.cholesky()
}

#[derive(Clone, Debug)]
pub struct CorrelationModel<T> {
    pub layout: ActionLayout,
    pub beta: f64,
    pub sigma_reg: Matrix<T>,
    pub chol: Matrix<T>,
}

impl<T: Real> CorrelationModel<T> {
    /// Shrinks and factorizes a raw covariance estimate.
    pub fn from_covariance(layout: ActionLayout, sigma: &Matrix<f64>, beta: f64) -> Result<Self> {
        let n = layout.flat_len();
        if sigma.shape() != (n, n) {
            return Err(Error::Layout(format!(
                "covariance is {:?}, layout needs {n}x{n}",
                sigma.shape()
            )));
        }
        let sigma_reg = shrink(sigma, beta)?;
        let chol = factorize(&sigma_reg)?;
        Ok(Self { layout, beta, sigma_reg: sigma_reg.cast(), chol: chol.cast() })
    }

    pub fn fit(layout: ActionLayout, normalized: &[ActionChunk<T>], beta: f64) -> Result<Self> {
        for c in normalized {
            c.check_layout(&layout)?;
        }
        let sigma = estimate_covariance(normalized)?;
        Self::from_covariance(layout, &sigma, beta)
    }

    /// Uncorrelated model (`Σ_reg = I`), for identity-noise baselines.
    pub fn identity(layout: ActionLayout) -> Self {
        let n = layout.flat_len();
        Self { layout, beta: 0.0, sigma_reg: Matrix::identity(n), chol: Matrix::identity(n) }
    }

    pub fn flat_len(&self) -> usize {
        self.layout.flat_len()
    }

    /// `ε = L z`, `z ~ N(0, I)`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> ActionChunk<T> {
        let z: Vec<T> = (0..self.flat_len()).map(|_| standard_normal(rng)).collect();
        self.color(&z)
    }

    /// Applies the Cholesky factor to a white vector.
    pub fn color(&self, z: &[T]) -> ActionChunk<T> {
        let n = self.flat_len();
        debug_assert_eq!(z.len(), n);
        let mut out = vec![T::zero(); n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = crate::scalar::dot(&self.chol.row(i)[..=i], &z[..=i]);
        }
        ActionChunk::from_flat(self.layout.horizon, self.layout.dim, out).expect("layout-sized buffer")
    }

    pub fn build_partition(&self, k_observed: usize) -> Result<InpaintPartition<T>> {
        InpaintPartition::new(self, k_observed)
    }
}

/// Split of the flattened chunk into the constrained leading rows and the
/// remaining free coordinates, with the regression matrix `Σ_UO Σ_OO⁻¹`.
#[derive(Clone, Debug)]
pub struct InpaintPartition<T> {
    pub k_observed: usize,
    pub observed: Vec<usize>,
    pub free: Vec<usize>,
    pub m_corr: Matrix<T>,
}

impl<T: Real> InpaintPartition<T> {
    pub fn new(model: &CorrelationModel<T>, k_observed: usize) -> Result<Self> {
        let (h, d) = (model.layout.horizon, model.layout.dim);
        if k_observed < 1 || k_observed >= h {
            return Err(Error::Parameter(format!("observed steps {k_observed} must lie in 1..{h}")));
        }
        let n_obs = k_observed * d;
        let observed: Vec<usize> = (0..n_obs).collect();
        let free: Vec<usize> = (n_obs..h * d).collect();
        let s_oo = model.sigma_reg.select(&observed, &observed);
        let l_oo = s_oo.cholesky()?;
        // Σ_OO X = Σ_OU column by column; M_corr = Xᵀ, so each solve yields a row.
        let mut m_corr = Matrix::zeros(free.len(), n_obs);
        for (r, &u) in free.iter().enumerate() {
            let rhs: Vec<T> = observed.iter().map(|&o| model.sigma_reg[(o, u)]).collect();
            let x = l_oo.cholesky_solve(&rhs);
            m_corr.row_mut(r).copy_from_slice(&x);
        }
        Ok(Self { k_observed, observed, free, m_corr })
    }

    /// Propagates a residual on the observed coordinates to the free ones.
    pub fn propagate(&self, delta_observed: &[T]) -> Vec<T> {
        self.m_corr.matvec(delta_observed).expect("observed-sized residual")
    }
}
