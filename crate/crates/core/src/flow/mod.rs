//! Flow matching on action chunks.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data). Training regresses
//! a velocity field onto `ε − a` along the straight path
//! `x_t = t ε + (1 − t) a`; sampling integrates that field with explicit
//! Euler steps.

mod mlp;
mod oracle;
mod synthetic;
pub mod train;

pub use mlp::{time_features, MlpShape, ParametricModel, TIME_FREQUENCIES};
pub use oracle::GaussianOracleModel;
pub use synthetic::LinearGaussian;

use rand::Rng;

use crate::action::ActionChunk;
use crate::correlation::CorrelationModel;
use crate::error::{Error, Result};
use crate::rng::open_unit;
use crate::scalar::Real;

/// Shape parameter of the time distribution, density proportional to
/// `t^(alpha - 1)` on `(0, 1]`.
pub const TIME_ALPHA: f64 = 1.5;
pub const DEFAULT_SAMPLES: usize = 15;
pub const DEFAULT_STEPS: usize = 10;

/// Maps `(x_t, t, context)` to a velocity chunk of the same shape.
pub trait VelocityModel<T: Real> {
    fn predict(&self, x: &ActionChunk<T>, t: T, context: &[T]) -> Result<ActionChunk<T>>;
}

impl<T: Real, M: VelocityModel<T> + ?Sized> VelocityModel<T> for &M {
    fn predict(&self, x: &ActionChunk<T>, t: T, context: &[T]) -> Result<ActionChunk<T>> {
        (**self).predict(x, t, context)
    }
}

/// `t ε + (1 − t) a`
pub fn interpolate<T: Real>(a: &ActionChunk<T>, eps: &ActionChunk<T>, t: T) -> Result<ActionChunk<T>> {
    a.same_shape(eps)?;
    let mut out = a.clone();
    for (o, &e) in out.flat_mut().iter_mut().zip(eps.flat()) {
        *o = t * e + (T::one() - t) * *o;
    }
    Ok(out)
}

/// `ε − a`
pub fn velocity_target<T: Real>(a: &ActionChunk<T>, eps: &ActionChunk<T>) -> Result<ActionChunk<T>> {
    a.same_shape(eps)?;
    let mut out = eps.clone();
    for (o, &x) in out.flat_mut().iter_mut().zip(a.flat()) {
        *o -= x;
    }
    Ok(out)
}

/// Draws `t ~ Beta(1.5, 1)` by inverting its CDF `t^1.5`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    open_unit(rng).powf(1.0 / TIME_ALPHA)
}

/// One training draw: a time and a noise chunk.
#[derive(Clone, Debug)]
pub struct FlowDraw<T> {
    pub t: T,
    pub eps: ActionChunk<T>,
}

/// Draws `n` (time, noise) pairs; noise comes from the given correlation
/// model (use [`CorrelationModel::identity`] for white noise).
pub fn draw_samples<T: Real, R: Rng + ?Sized>(
    noise: &CorrelationModel<T>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<FlowDraw<T>>> {
    if n < 1 {
        return Err(Error::Parameter("flow loss needs at least one sample".into()));
    }
    Ok((0..n)
        .map(|_| {
            let t = T::lit(sample_time(rng));
            let eps = noise.sample_noise(rng);
            FlowDraw { t, eps }
        })
        .collect())
}

/// `(1/N) Σ_n (1/HD) ‖v(x_t, t) − (ε − a)‖²` over the given draws.
pub fn flow_loss<T: Real, M: VelocityModel<T> + ?Sized>(
    model: &M,
    a: &ActionChunk<T>,
    context: &[T],
    draws: &[FlowDraw<T>],
) -> Result<T> {
    if draws.is_empty() {
        return Err(Error::Parameter("flow loss needs at least one sample".into()));
    }
    let mut total = 0.0f64;
    for d in draws {
        let x = interpolate(a, &d.eps, d.t)?;
        let v = model.predict(&x, d.t, context)?;
        let mut se = 0.0f64;
        for ((&vi, &e), &ai) in v.flat().iter().zip(d.eps.flat()).zip(a.flat()) {
            let r = (vi - (e - ai)).as_f64();
            se += r * r;
        }
        total += se / a.flat().len() as f64;
    }
    Ok(T::lit(total / draws.len() as f64))
}

/// Euler integration of `dx/dt = v` from `t = 1` down to `t = 0`.
pub fn denoise<T: Real, M: VelocityModel<T> + ?Sized>(
    model: &M,
    eps_start: &ActionChunk<T>,
    context: &[T],
    steps: usize,
) -> Result<ActionChunk<T>> {
    denoise_with(model, eps_start, context, steps, |_, _, _, _| Ok(()))
}

/// [`denoise`] with a hook run after every Euler update.
///
/// The hook receives the step index, the time the velocity was evaluated
/// at, the time the updated state now sits at, and the state itself.
pub fn denoise_with<T, M, F>(
    model: &M,
    eps_start: &ActionChunk<T>,
    context: &[T],
    steps: usize,
    mut after_step: F,
) -> Result<ActionChunk<T>>
where
    T: Real,
    M: VelocityModel<T> + ?Sized,
    F: FnMut(usize, T, T, &mut ActionChunk<T>) -> Result<()>,
{
    if steps < 1 {
        return Err(Error::Parameter("denoising needs at least one step".into()));
    }
    let dt = T::lit(1.0 / steps as f64);
    let time = |k: usize| T::lit(1.0 - k as f64 / steps as f64);
    let mut x = eps_start.clone();
    for k in 0..steps {
        let t = time(k);
        let v = model.predict(&x, t, context)?;
        for (xi, &vi) in x.flat_mut().iter_mut().zip(v.flat()) {
            *xi -= dt * vi;
        }
        after_step(k, t, time(k + 1), &mut x)?;
        if !x.is_finite() {
            return Err(Error::Numerical { step: k, message: "non-finite state during denoising".into() });
        }
    }
    Ok(x)
}
