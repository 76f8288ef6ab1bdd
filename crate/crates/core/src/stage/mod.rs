//! Task progress: stage labels, the stage classifier, stage/task fusion
//! tokens and the voting tracker.

mod fusion;
mod tracker;

pub use fusion::{normalized_stage, FusionConfig, StageFusion, FUSION_TOKENS};
pub use tracker::{write_events, StageEvent, StageTracker, HISTORY_LEN};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::train::{check_divergence, cosine_lr, Sgd};
use crate::linalg::Matrix;
use crate::rng::standard_normal;
use crate::scalar::{axpy, dot, Real};

pub const MAX_STAGES: usize = 15;
/// Weight of the stage cross-entropy in the total training loss.
pub const STAGE_LOSS_WEIGHT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub id: usize,
    pub name: String,
    pub n_stages: usize,
}

/// Splits an episode of `len` steps into `n_stages` equal-duration stages.
pub fn label_stages(len: usize, n_stages: usize) -> Result<Vec<usize>> {
    if n_stages == 0 || len < n_stages {
        return Err(Error::Labeling(format!("cannot split {len} steps into {n_stages} stages")));
    }
    Ok((0..len).map(|l| (l * n_stages / len).min(n_stages - 1)).collect())
}

/// Linear stage classifier with per-task masking of unused stages.
#[derive(Clone, Debug)]
pub struct StageHead<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> StageHead<T> {
    pub fn zeros(width: usize) -> Self {
        Self { weight: Matrix::zeros(MAX_STAGES, width), bias: vec![T::zero(); MAX_STAGES] }
    }

    pub fn random<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let s = T::lit(0.01);
        Self {
            weight: Matrix::from_fn(MAX_STAGES, width, |_, _| standard_normal::<T, _>(rng) * s),
            bias: vec![T::zero(); MAX_STAGES],
        }
    }

    pub fn width(&self) -> usize {
        self.weight.cols()
    }

    /// Logits with stages `>= n_stages` set to `-inf`.
    pub fn logits(&self, features: &[T], n_stages: usize) -> Result<Vec<T>> {
        if features.len() != self.width() {
            return Err(Error::Layout(format!(
                "stage features of width {} for head of width {}",
                features.len(),
                self.width()
            )));
        }
        if n_stages == 0 || n_stages > MAX_STAGES {
            return Err(Error::Parameter(format!("task with {n_stages} stages")));
        }
        Ok((0..MAX_STAGES)
            .map(|s| {
                if s < n_stages {
                    self.bias[s] + dot(self.weight.row(s), features)
                } else {
                    T::neg_infinity()
                }
            })
            .collect())
    }

    pub fn predict(&self, features: &[T], n_stages: usize) -> Result<(Vec<T>, usize)> {
        let logits = self.logits(features, n_stages)?;
        Ok((logits.clone(), argmax(&logits[..n_stages])))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy over the first `n_stages` logits and its gradient
/// with respect to them.
pub fn stage_loss<T: Real>(logits: &[T], label: usize, n_stages: usize) -> Result<(f64, Vec<T>)> {
    if label >= n_stages || n_stages > logits.len() {
        return Err(Error::Labeling(format!("stage label {label} invalid for {n_stages} stages")));
    }
    let valid = &logits[..n_stages];
    let max = valid.iter().map(|l| l.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = valid.iter().map(|l| (l.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - valid[label].as_f64();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(s, e)| T::lit(e / z - if s == label { 1.0 } else { 0.0 }))
        .collect();
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty on the weights (not the biases).
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 64, learning_rate: 0.5, momentum: 0.9, weight_decay: 0.0 }
    }
}

/// A feature vector with its task's stage count and the true stage.
#[derive(Clone, Debug)]
pub struct StageSample<T> {
    pub features: Vec<T>,
    pub n_stages: usize,
    pub label: usize,
}

/// Minibatch SGD on the stage cross-entropy. Returns the loss per step.
pub fn train_stage_head<T: Real, R: Rng + ?Sized>(
    head: &mut StageHead<T>,
    samples: &[StageSample<T>],
    cfg: &HeadTrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Estimation("stage training set is empty".into()));
    }
    let w = head.width();
    let n_params = MAX_STAGES * (w + 1);
    let mut opt = Sgd::new(n_params, cfg.momentum);
    let mut params = vec![T::zero(); n_params];
    let mut grad = vec![T::zero(); n_params];
    let inv = T::lit(1.0 / cfg.batch_size as f64);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = T::zero());
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let s = &samples[rng.random_range(0..samples.len())];
            let logits = head.logits(&s.features, s.n_stages)?;
            let (l, g) = stage_loss(&logits, s.label, s.n_stages)?;
            loss += l;
            for (k, &gk) in g.iter().enumerate() {
                axpy(gk * inv, &s.features, &mut grad[k * w..(k + 1) * w]);
                grad[MAX_STAGES * w + k] += gk * inv;
            }
        }
        loss /= cfg.batch_size as f64;
        check_divergence(step, loss)?;
        if cfg.weight_decay > 0.0 {
            axpy(T::lit(cfg.weight_decay), head.weight.as_slice(), &mut grad[..MAX_STAGES * w]);
        }
        params[..MAX_STAGES * w].copy_from_slice(head.weight.as_slice());
        params[MAX_STAGES * w..].copy_from_slice(&head.bias);
        opt.step(&mut params, &grad, cosine_lr(cfg.learning_rate, step, cfg.steps));
        head.weight.as_mut_slice().copy_from_slice(&params[..MAX_STAGES * w]);
        head.bias.copy_from_slice(&params[MAX_STAGES * w..]);
        curve.push(loss);
    }
    Ok(curve)
}

pub fn head_accuracy<T: Real>(head: &StageHead<T>, samples: &[StageSample<T>]) -> Result<f64> {
    let mut hits = 0usize;
    for s in samples {
        hits += usize::from(head.predict(&s.features, s.n_stages)?.1 == s.label);
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}
