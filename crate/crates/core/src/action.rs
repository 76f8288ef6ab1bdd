//! Action tensor layout, delta conversion and per-timestamp normalization.
//!
//! Every flow computation happens on [`ActionChunk`]s that have been
//! converted to deltas against the joint state at prediction time and then
//! normalized cell by cell. Body velocities and gripper commands are not
//! positions: they pass through the delta step untouched and are normalized
//! with one global mean/std per dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Lower bound on every normalization standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionLayout {
    pub horizon: usize,
    pub dim: usize,
    pub velocity_dims: Vec<usize>,
    pub gripper_dims: Vec<usize>,
    pub control_rate: f64,
}

impl ActionLayout {
    pub fn new(
        horizon: usize,
        dim: usize,
        velocity_dims: Vec<usize>,
        gripper_dims: Vec<usize>,
        control_rate: f64,
    ) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::Layout(format!("horizon must be at least 2, got {horizon}")));
        }
        if dim < 1 {
            return Err(Error::Layout("action dimension must be positive".into()));
        }
        for &d in velocity_dims.iter().chain(&gripper_dims) {
            if d >= dim {
                return Err(Error::Layout(format!("dimension index {d} outside 0..{dim}")));
            }
        }
        if velocity_dims.iter().any(|d| gripper_dims.contains(d)) {
            return Err(Error::Layout("velocity and gripper dimensions overlap".into()));
        }
        Ok(Self { horizon, dim, velocity_dims, gripper_dims, control_rate })
    }

    /// Full-size layout: 30 steps of 23-D actions at 30 Hz (3 base velocity,
    /// 4 trunk, 7 left arm, left gripper, 7 right arm, right gripper).
    pub fn full_scale() -> Self {
        Self::new(30, 23, vec![0, 1, 2], vec![14, 22], 30.0).expect("static layout")
    }

    #[inline]
    pub fn flat_len(&self) -> usize {
        self.horizon * self.dim
    }

    /// Dimensions copied verbatim by the delta conversion.
    pub fn is_delta_exempt(&self, d: usize) -> bool {
        self.velocity_dims.contains(&d) || self.gripper_dims.contains(&d)
    }

    /// Position-like dimensions (neither velocity nor gripper).
    pub fn joint_dims(&self) -> Vec<usize> {
        (0..self.dim).filter(|&d| !self.is_delta_exempt(d)).collect()
    }

    /// Default normalization-exempt set: velocities and grippers.
    pub fn default_exempt_dims(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.velocity_dims.iter().chain(&self.gripper_dims).copied().collect();
        v.sort_unstable();
        v
    }

    /// Same dimension semantics with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::new(horizon, self.dim, self.velocity_dims.clone(), self.gripper_dims.clone(), self.control_rate)
    }
}

/// An `H x D` block of actions; row `i` is the `i`-th step of the chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk<T> {
    values: Matrix<T>,
}

impl<T: Real> ActionChunk<T> {
    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self { values: Matrix::zeros(horizon, dim) }
    }

    pub fn from_matrix(values: Matrix<T>) -> Self {
        Self { values }
    }

    pub fn from_flat(horizon: usize, dim: usize, flat: Vec<T>) -> Result<Self> {
        Ok(Self { values: Matrix::from_vec(horizon, dim, flat)? })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Layout("ragged action rows".into()));
        }
        Self::from_flat(rows.len(), dim, rows.concat())
    }

    #[inline]
    pub fn horizon(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        self.values.row(i)
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        self.values.row_mut(i)
    }

    #[inline]
    pub fn get(&self, i: usize, d: usize) -> T {
        self.values[(i, d)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, d: usize, v: T) {
        self.values[(i, d)] = v;
    }

    /// Row-major flattening `vec(a)`, index `i * D + d`.
    #[inline]
    pub fn flat(&self) -> &[T] {
        self.values.as_slice()
    }

    #[inline]
    pub fn flat_mut(&mut self) -> &mut [T] {
        self.values.as_mut_slice()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.all_finite()
    }

    pub fn cast<U: Real>(&self) -> ActionChunk<U> {
        ActionChunk { values: self.values.cast() }
    }

    pub fn check_layout(&self, layout: &ActionLayout) -> Result<()> {
        if self.horizon() != layout.horizon || self.dim() != layout.dim {
            return Err(Error::Layout(format!(
                "chunk is {}x{}, layout expects {}x{}",
                self.horizon(),
                self.dim(),
                layout.horizon,
                layout.dim
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::Layout(format!(
                "chunk shapes differ: {:?} vs {:?}",
                self.values.shape(),
                other.values.shape()
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values.max_abs_diff(&other.values)
    }
}

fn check_joints<T: Real>(layout: &ActionLayout, chunk: &ActionChunk<T>, joints: &[T]) -> Result<()> {
    chunk.check_layout(layout)?;
    if joints.len() != layout.dim {
        return Err(Error::Layout(format!(
            "joint vector has {} entries, layout dimension is {}",
            joints.len(),
            layout.dim
        )));
    }
    if joints.iter().any(|q| !q.is_finite()) {
        return Err(Error::Layout("joint vector contains non-finite entries".into()));
    }
    Ok(())
}

/// Re-expresses absolute targets relative to the current joint state.
pub fn to_delta<T: Real>(layout: &ActionLayout, absolute: &ActionChunk<T>, joints: &[T]) -> Result<ActionChunk<T>> {
    check_joints(layout, absolute, joints)?;
    let mut out = absolute.clone();
    for d in layout.joint_dims() {
        for i in 0..layout.horizon {
            out.set(i, d, absolute.get(i, d) - joints[d]);
        }
    }
    Ok(out)
}

pub fn from_delta<T: Real>(layout: &ActionLayout, delta: &ActionChunk<T>, joints: &[T]) -> Result<ActionChunk<T>> {
    check_joints(layout, delta, joints)?;
    let mut out = delta.clone();
    for d in layout.joint_dims() {
        for i in 0..layout.horizon {
            out.set(i, d, delta.get(i, d) + joints[d]);
        }
    }
    Ok(out)
}

/// Per-(timestep, dimension) mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats<T> {
    pub mu: Matrix<T>,
    pub sigma: Matrix<T>,
    pub exempt_dims: Vec<usize>,
}

impl<T: Real> NormalizationStats<T> {
    /// Fits population statistics over delta chunks.
    ///
    /// Non-exempt cells get their own moments; exempt dimensions pool every
    /// row of every chunk into one mean/std that is broadcast over the
    /// horizon. Moments accumulate in `f64`.
    pub fn fit(chunks: &[ActionChunk<T>], layout: &ActionLayout, exempt_dims: &[usize]) -> Result<Self> {
        if chunks.len() < 2 {
            return Err(Error::Estimation(format!(
                "normalization needs at least 2 chunks, got {}",
                chunks.len()
            )));
        }
        if let Some(&d) = exempt_dims.iter().find(|&&d| d >= layout.dim) {
            return Err(Error::Layout(format!("exempt dimension {d} outside layout")));
        }
        let (h, dim) = (layout.horizon, layout.dim);
        let mut sum = vec![0.0f64; h * dim];
        let mut sq = vec![0.0f64; h * dim];
        for c in chunks {
            c.check_layout(layout)?;
            for (k, &v) in c.flat().iter().enumerate() {
                let v = v.as_f64();
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        let n = chunks.len() as f64;
        let moments = |s: f64, q: f64, count: f64| {
            let mean = s / count;
            let var = (q / count - mean * mean).max(0.0);
            (mean, var.sqrt().max(SIGMA_FLOOR))
        };
        let mut mu = Matrix::zeros(h, dim);
        let mut sigma = Matrix::zeros(h, dim);
        for d in 0..dim {
            if exempt_dims.contains(&d) {
                let s: f64 = (0..h).map(|i| sum[i * dim + d]).sum();
                let q: f64 = (0..h).map(|i| sq[i * dim + d]).sum();
                let (m, sd) = moments(s, q, n * h as f64);
                for i in 0..h {
                    mu[(i, d)] = T::lit(m);
                    sigma[(i, d)] = T::lit(sd);
                }
            } else {
                for i in 0..h {
                    let (m, sd) = moments(sum[i * dim + d], sq[i * dim + d], n);
                    mu[(i, d)] = T::lit(m);
                    sigma[(i, d)] = T::lit(sd);
                }
            }
        }
        let mut exempt = exempt_dims.to_vec();
        exempt.sort_unstable();
        exempt.dedup();
        Ok(Self { mu, sigma, exempt_dims: exempt })
    }

    pub fn horizon(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    fn check(&self, chunk: &ActionChunk<T>) -> Result<()> {
        if chunk.horizon() != self.horizon() || chunk.dim() != self.dim() {
            return Err(Error::Layout(format!(
                "chunk is {}x{}, statistics are {}x{}",
                chunk.horizon(),
                chunk.dim(),
                self.horizon(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, chunk: &ActionChunk<T>) -> Result<ActionChunk<T>> {
        self.check(chunk)?;
        let mut out = chunk.clone();
        for ((o, &m), &s) in out.flat_mut().iter_mut().zip(self.mu.as_slice()).zip(self.sigma.as_slice()) {
            *o = (*o - m) / s;
        }
        Ok(out)
    }

    pub fn denormalize(&self, chunk: &ActionChunk<T>) -> Result<ActionChunk<T>> {
        self.check(chunk)?;
        let mut out = chunk.clone();
        for ((o, &m), &s) in out.flat_mut().iter_mut().zip(self.mu.as_slice()).zip(self.sigma.as_slice()) {
            *o = *o * s + m;
        }
        Ok(out)
    }

    /// Normalizes a single action row as if it sat at chunk row `row`.
    pub fn normalize_row(&self, row: usize, values: &[T]) -> Vec<T> {
        values
            .iter()
            .enumerate()
            .map(|(d, &v)| (v - self.mu[(row, d)]) / self.sigma[(row, d)])
            .collect()
    }

    pub fn denormalize_row(&self, row: usize, values: &[T]) -> Vec<T> {
        values
            .iter()
            .enumerate()
            .map(|(d, &v)| v * self.sigma[(row, d)] + self.mu[(row, d)])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> NormalizationStats<U> {
        NormalizationStats { mu: self.mu.cast(), sigma: self.sigma.cast(), exempt_dims: self.exempt_dims.clone() }
    }
}
