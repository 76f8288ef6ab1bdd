use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::ActionChunk;
use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::scalar::{axpy, dot, Real};

use super::{interpolate, FlowDraw, VelocityModel};

pub const TIME_FREQUENCIES: usize = 8;
const MIN_PERIOD: f64 = 0.02;
const MAX_PERIOD: f64 = 4.0;

/// `[sin(2πt/p_k)…, cos(2πt/p_k)…]` for periods log-spaced between
/// `MIN_PERIOD` and `MAX_PERIOD`.
pub fn time_features<T: Real>(t: T) -> [T; 2 * TIME_FREQUENCIES] {
    let mut out = [T::zero(); 2 * TIME_FREQUENCIES];
    let t = t.as_f64();
    for k in 0..TIME_FREQUENCIES {
        let frac = k as f64 / (TIME_FREQUENCIES - 1) as f64;
        let period = MIN_PERIOD * (MAX_PERIOD / MIN_PERIOD).powf(frac);
        let phase = std::f64::consts::TAU * t / period;
        out[k] = T::lit(phase.sin());
        out[TIME_FREQUENCIES + k] = T::lit(phase.cos());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub horizon: usize,
    pub dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
}

impl MlpShape {
    pub fn action_len(&self) -> usize {
        self.horizon * self.dim
    }

    fn offsets(&self) -> Offsets {
        let (n, h, c) = (self.action_len(), self.hidden, self.context_dim);
        let tf = 2 * TIME_FREQUENCIES;
        let w1x = 0;
        let w1t = w1x + n * h;
        let w1c = w1t + tf * h;
        let b1 = w1c + c * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h * n;
        Offsets { w1x, w1t, w1c, b1, w2, b2, w3, b3, total: b3 + n }
    }

    pub fn param_count(&self) -> usize {
        self.offsets().total
    }
}

#[derive(Clone, Copy, Debug)]
struct Offsets {
    w1x: usize,
    w1t: usize,
    w1c: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Two-hidden-layer SiLU network `[x_t ‖ sincos(t) ‖ context] → velocity`.
///
/// All weights live in one flat buffer so optimizers and checkpoints can
/// treat the model as a plain parameter vector. Weight matrices are stored
/// input-major (`in × out`).
#[derive(Clone, Debug)]
pub struct ParametricModel<T> {
    shape: MlpShape,
    offsets: Offsets,
    params: Vec<T>,
}

struct Activations<T> {
    z1: Vec<T>,
    h1: Vec<T>,
    z2: Vec<T>,
    h2: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> ParametricModel<T> {
    pub fn new<R: Rng + ?Sized>(shape: MlpShape, rng: &mut R) -> Self {
        let offsets = shape.offsets();
        let mut params = vec![T::zero(); offsets.total];
        let (n, h) = (shape.action_len(), shape.hidden);
        let fan1 = (n + 2 * TIME_FREQUENCIES + shape.context_dim) as f64;
        for p in &mut params[offsets.w1x..offsets.b1] {
            *p = standard_normal::<T, _>(rng) * T::lit(fan1.powf(-0.5));
        }
        for p in &mut params[offsets.w2..offsets.b2] {
            *p = standard_normal::<T, _>(rng) * T::lit((h as f64).powf(-0.5));
        }
        for p in &mut params[offsets.w3..offsets.b3] {
            *p = standard_normal::<T, _>(rng) * T::lit(0.5 * (h as f64).powf(-0.5));
        }
        Self { shape, offsets, params }
    }

    pub fn from_params(shape: MlpShape, params: Vec<T>) -> Result<Self> {
        let offsets = shape.offsets();
        if params.len() != offsets.total {
            return Err(Error::Format(format!(
                "parameter buffer has {} entries, shape needs {}",
                params.len(),
                offsets.total
            )));
        }
        Ok(Self { shape, offsets, params })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check(&self, x: &[T], context: &[T]) -> Result<()> {
        if x.len() != self.shape.action_len() {
            return Err(Error::Layout(format!(
                "state of length {} for model with {} action entries",
                x.len(),
                self.shape.action_len()
            )));
        }
        if context.len() != self.shape.context_dim {
            return Err(Error::Layout(format!(
                "context of length {} for model expecting {}",
                context.len(),
                self.shape.context_dim
            )));
        }
        Ok(())
    }

    /// First-layer pre-activation contributed by bias and context, shared by
    /// every draw of the same example.
    fn context_base(&self, context: &[T]) -> Vec<T> {
        let o = &self.offsets;
        let h = self.shape.hidden;
        let mut base = self.params[o.b1..o.b1 + h].to_vec();
        for (c, &v) in context.iter().enumerate() {
            if v != T::zero() {
                axpy(v, &self.params[o.w1c + c * h..o.w1c + (c + 1) * h], &mut base);
            }
        }
        base
    }

    fn forward_from(&self, base: &[T], x: &[T], t: T) -> Activations<T> {
        let o = &self.offsets;
        let (n, h) = (self.shape.action_len(), self.shape.hidden);
        let p = &self.params;
        let mut z1 = base.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, &p[o.w1x + i * h..o.w1x + (i + 1) * h], &mut z1);
        }
        for (k, &f) in time_features(t).iter().enumerate() {
            axpy(f, &p[o.w1t + k * h..o.w1t + (k + 1) * h], &mut z1);
        }
        let h1: Vec<T> = z1.iter().map(|&z| z * sigmoid(z)).collect();
        let mut z2 = p[o.b2..o.b2 + h].to_vec();
        for (i, &a) in h1.iter().enumerate() {
            axpy(a, &p[o.w2 + i * h..o.w2 + (i + 1) * h], &mut z2);
        }
        let h2: Vec<T> = z2.iter().map(|&z| z * sigmoid(z)).collect();
        let mut v = p[o.b3..o.b3 + n].to_vec();
        for (i, &a) in h2.iter().enumerate() {
            axpy(a, &p[o.w3 + i * n..o.w3 + (i + 1) * n], &mut v);
        }
        Activations { z1, h1, z2, h2, v }
    }

    pub fn forward(&self, x: &[T], t: T, context: &[T]) -> Result<Vec<T>> {
        self.check(x, context)?;
        let base = self.context_base(context);
        Ok(self.forward_from(&base, x, t).v)
    }

    /// Flow loss of one example over `draws`, adding its gradient into `grad`.
    pub fn loss_and_grad(&self, a: &ActionChunk<T>, context: &[T], draws: &[FlowDraw<T>], grad: &mut [T]) -> Result<T> {
        self.check(a.flat(), context)?;
        if draws.is_empty() {
            return Err(Error::Parameter("flow loss needs at least one sample".into()));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Layout("gradient buffer does not match parameter count".into()));
        }
        let o = self.offsets;
        let (n, h) = (self.shape.action_len(), self.shape.hidden);
        let p = &self.params;
        let base = self.context_base(context);
        let scale = T::lit(2.0 / (n * draws.len()) as f64);
        let mut loss = 0.0f64;
        let mut g_base = vec![T::zero(); h];
        let mut g_h2 = vec![T::zero(); h];
        let mut g_h1 = vec![T::zero(); h];
        for d in draws {
            let x = interpolate(a, &d.eps, d.t)?;
            let act = self.forward_from(&base, x.flat(), d.t);
            let mut g_v = act.v.clone();
            let mut se = 0.0f64;
            for ((g, &e), &ai) in g_v.iter_mut().zip(d.eps.flat()).zip(a.flat()) {
                let r = *g - (e - ai);
                se += r.as_f64() * r.as_f64();
                *g = r * scale;
            }
            loss += se / n as f64;

            axpy(T::one(), &g_v, &mut grad[o.b3..o.b3 + n]);
            for i in 0..h {
                let w_row = &p[o.w3 + i * n..o.w3 + (i + 1) * n];
                g_h2[i] = dot(w_row, &g_v);
                axpy(act.h2[i], &g_v, &mut grad[o.w3 + i * n..o.w3 + (i + 1) * n]);
            }
            let g_z2: Vec<T> = g_h2
                .iter()
                .zip(&act.z2)
                .map(|(&g, &z)| {
                    let s = sigmoid(z);
                    g * s * (T::one() + z * (T::one() - s))
                })
                .collect();
            axpy(T::one(), &g_z2, &mut grad[o.b2..o.b2 + h]);
            for i in 0..h {
                g_h1[i] = dot(&p[o.w2 + i * h..o.w2 + (i + 1) * h], &g_z2);
                axpy(act.h1[i], &g_z2, &mut grad[o.w2 + i * h..o.w2 + (i + 1) * h]);
            }
            let g_z1: Vec<T> = g_h1
                .iter()
                .zip(&act.z1)
                .map(|(&g, &z)| {
                    let s = sigmoid(z);
                    g * s * (T::one() + z * (T::one() - s))
                })
                .collect();
            axpy(T::one(), &g_z1, &mut g_base);
            for (i, &xi) in x.flat().iter().enumerate() {
                axpy(xi, &g_z1, &mut grad[o.w1x + i * h..o.w1x + (i + 1) * h]);
            }
            for (k, &f) in time_features(d.t).iter().enumerate() {
                axpy(f, &g_z1, &mut grad[o.w1t + k * h..o.w1t + (k + 1) * h]);
            }
        }
        axpy(T::one(), &g_base, &mut grad[o.b1..o.b1 + h]);
        for (c, &v) in context.iter().enumerate() {
            if v != T::zero() {
                axpy(v, &g_base, &mut grad[o.w1c + c * h..o.w1c + (c + 1) * h]);
            }
        }
        Ok(T::lit(loss / draws.len() as f64))
    }
}

impl<T: Real> VelocityModel<T> for ParametricModel<T> {
    fn predict(&self, x: &ActionChunk<T>, t: T, context: &[T]) -> Result<ActionChunk<T>> {
        let v = self.forward(x.flat(), t, context)?;
        ActionChunk::from_flat(x.horizon(), x.dim(), v)
    }
}
