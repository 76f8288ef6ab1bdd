//! Minibatch SGD for the velocity network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::ActionChunk;
use crate::correlation::CorrelationModel;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Real;

use super::{denoise, draw_samples, ParametricModel, VelocityModel, DEFAULT_SAMPLES};

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, learning_rate: 0.05, momentum: 0.9, grad_clip: Some(5.0), samples: DEFAULT_SAMPLES }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::Parameter("samples per example must be at least 1".into()));
        }
        if self.batch_size < 1 || self.steps < 1 {
            return Err(Error::Parameter("batch size and step count must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter("learning rate must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One training pair: a normalized delta chunk and its conditioning vector.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub chunk: ActionChunk<T>,
    pub context: Vec<T>,
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Heavy-ball momentum over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    buf: Vec<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(n: usize, momentum: f64) -> Self {
        Self { momentum: T::lit(momentum), buf: vec![T::zero(); n] }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        let lr = T::lit(lr);
        for ((p, &g), b) in params.iter_mut().zip(grad).zip(&mut self.buf) {
            *b = self.momentum * *b + g;
            *p -= lr * *b;
        }
    }
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`.
pub fn clip_norm<T: Real>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

pub fn check_divergence(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

/// Trains `model` in place and returns the per-step minibatch loss.
pub fn train<T: Real, R: Rng + ?Sized>(
    model: &mut ParametricModel<T>,
    examples: &[Example<T>],
    noise: &CorrelationModel<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    train_with(model, examples, noise, cfg, rng, |_, _, _| Ok(()))
}

/// [`train`] with a callback after each optimizer step, receiving the step
/// index, the updated model and the step's loss.
pub fn train_with<T, R, F>(
    model: &mut ParametricModel<T>,
    examples: &[Example<T>],
    noise: &CorrelationModel<T>,
    cfg: &TrainConfig,
    rng: &mut R,
    mut after_step: F,
) -> Result<Vec<f64>>
where
    T: Real,
    R: Rng + ?Sized,
    F: FnMut(usize, &ParametricModel<T>, f64) -> Result<()>,
{
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Estimation("training set is empty".into()));
    }
    let mut opt = Sgd::new(model.param_count(), cfg.momentum);
    let mut grad = vec![T::zero(); model.param_count()];
    let mut curve = Vec::with_capacity(cfg.steps);
    let inv_batch = T::lit(1.0 / cfg.batch_size as f64);
    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = T::zero());
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let ex = &examples[rng.random_range(0..examples.len())];
            let draws = draw_samples(noise, cfg.samples, rng)?;
            loss += model.loss_and_grad(&ex.chunk, &ex.context, &draws, &mut grad)?.as_f64();
        }
        loss /= cfg.batch_size as f64;
        check_divergence(step, loss)?;
        grad.iter_mut().for_each(|g| *g *= inv_batch);
        if let Some(c) = cfg.grad_clip {
            clip_norm(&mut grad, c);
        }
        opt.step(model.params_mut(), &grad, cosine_lr(cfg.learning_rate, step, cfg.steps));
        curve.push(loss);
        after_step(step, model, loss)?;
    }
    Ok(curve)
}

/// Energy score of the sampler on held-out chunks, lower is better:
/// `E‖X − a‖ − ½ E‖X − X′‖` estimated from `draws` samples per example.
/// It is a proper scoring rule, so a sampler that collapses onto the
/// conditional mean does not beat one that matches the data distribution.
/// White draws come from a stream fixed by `seed` and are coloured by
/// `noise`, so runs that differ only in their noise model see the same draws.
pub fn energy_score<T, M>(
    model: &M,
    examples: &[Example<T>],
    noise: &CorrelationModel<T>,
    steps: usize,
    draws: usize,
    seed: u64,
) -> Result<f64>
where
    T: Real,
    M: VelocityModel<T> + ?Sized,
{
    if examples.is_empty() || draws < 2 {
        return Err(Error::Estimation("energy score needs examples and at least two draws".into()));
    }
    let dist = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>().sqrt();
    let mut rng = stream(seed, "validation");
    let mut total = 0.0;
    for ex in examples {
        let xs = (0..draws)
            .map(|_| denoise(model, &noise.sample_noise(&mut rng), &ex.context, steps))
            .collect::<Result<Vec<_>>>()?;
        let fit: f64 = xs.iter().map(|x| dist(x.flat(), ex.chunk.flat())).sum::<f64>() / draws as f64;
        let mut spread = 0.0;
        for i in 0..draws {
            for j in i + 1..draws {
                spread += dist(xs[i].flat(), xs[j].flat());
            }
        }
        spread /= (draws * (draws - 1) / 2) as f64;
        total += fit - 0.5 * spread;
    }
    Ok(total / examples.len() as f64)
}
