//! Natural cubic spline resampling of executed action segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Natural cubic spline through `(i, y_i)` for `i = 0..n`.
#[derive(Clone, Debug)]
pub struct NaturalSpline<T> {
    y: Vec<T>,
    /// Second derivatives at the knots; zero at both ends.
    m: Vec<T>,
}

impl<T: Real> NaturalSpline<T> {
    pub fn fit(y: &[T]) -> Result<Self> {
        let n = y.len();
        if n < 4 {
            return Err(Error::Interpolation(format!("cubic spline needs at least 4 knots, got {n}")));
        }
        // Unit knot spacing: m[i-1] + 4 m[i] + m[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1]),
        // solved for the interior by the Thomas algorithm.
        let k = n - 2;
        let four = T::lit(4.0);
        let six = T::lit(6.0);
        let rhs: Vec<T> = (1..n - 1).map(|i| six * (y[i + 1] - T::lit(2.0) * y[i] + y[i - 1])).collect();
        let mut c = vec![T::zero(); k];
        let mut d = vec![T::zero(); k];
        c[0] = T::one() / four;
        d[0] = rhs[0] / four;
        for i in 1..k {
            let denom = four - c[i - 1];
            c[i] = T::one() / denom;
            d[i] = (rhs[i] - d[i - 1]) / denom;
        }
        let mut m = vec![T::zero(); n];
        m[k] = d[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = d[i] - c[i] * m[i + 2];
        }
        Ok(Self { y: y.to_vec(), m })
    }

    /// Value at `x ∈ [0, n−1]`; exact at knots.
    pub fn eval(&self, x: T) -> T {
        let n = self.y.len();
        let j = x.floor().to_usize().unwrap_or(0).min(n - 2);
        let u = x - T::from_usize_lossy(j);
        let w = T::one() - u;
        let six = T::lit(6.0);
        w * self.y[j] + u * self.y[j + 1] + ((w * w * w - w) * self.m[j] + (u * u * u - u) * self.m[j + 1]) / six
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub in_steps: usize,
    pub out_steps: usize,
    pub velocity_dims: Vec<usize>,
    pub gripper_dims: Vec<usize>,
    /// Largest tolerated gripper swing (normalized units) for compression.
    pub gripper_change_threshold: f64,
}

impl CompressionConfig {
    /// Output length for a target speedup, rounded to whole steps.
    pub fn with_speedup(in_steps: usize, speedup: f64, velocity_dims: Vec<usize>, gripper_dims: Vec<usize>, threshold: f64) -> Result<Self> {
        if !(speedup >= 1.0) {
            return Err(Error::Parameter(format!("speedup {speedup} must be at least 1")));
        }
        let out_steps = (in_steps as f64 / speedup).round() as usize;
        let cfg = Self { in_steps, out_steps, velocity_dims, gripper_dims, gripper_change_threshold: threshold };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn speedup(&self) -> f64 {
        self.in_steps as f64 / self.out_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_steps < 4 {
            return Err(Error::Interpolation(format!("compression needs at least 4 input steps, got {}", self.in_steps)));
        }
        if self.out_steps < 2 || self.out_steps > self.in_steps {
            return Err(Error::Parameter(format!(
                "cannot compress {} steps into {}",
                self.in_steps, self.out_steps
            )));
        }
        Ok(())
    }
}

/// Resamples `in_steps` rows onto `out_steps` evenly spaced times over the
/// same span, then scales the velocity dimensions by the speedup.
pub fn compress<T: Real>(actions: &Matrix<T>, cfg: &CompressionConfig) -> Result<Matrix<T>> {
    cfg.validate()?;
    if actions.rows() != cfg.in_steps {
        return Err(Error::Layout(format!("expected {} rows to compress, got {}", cfg.in_steps, actions.rows())));
    }
    let dim = actions.cols();
    let span = cfg.in_steps - 1;
    let times: Vec<T> = (0..cfg.out_steps)
        .map(|m| T::lit((m * span) as f64 / (cfg.out_steps - 1) as f64))
        .collect();
    let speed = T::lit(cfg.speedup());
    let mut out = Matrix::zeros(cfg.out_steps, dim);
    for d in 0..dim {
        let col: Vec<T> = (0..cfg.in_steps).map(|i| actions[(i, d)]).collect();
        let spline = NaturalSpline::fit(&col)?;
        let scale = if cfg.velocity_dims.contains(&d) { speed } else { T::one() };
        for (m, &t) in times.iter().enumerate() {
            out[(m, d)] = spline.eval(t) * scale;
        }
    }
    Ok(out)
}

/// False when any gripper dimension swings by more than the threshold
/// across the given rows.
pub fn should_compress<T: Real>(actions: &Matrix<T>, cfg: &CompressionConfig) -> bool {
    cfg.gripper_dims.iter().all(|&d| {
        let col = (0..actions.rows()).map(|i| actions[(i, d)].as_f64());
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo <= cfg.gripper_change_threshold
    })
}
