use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::standard_normal;
use crate::scalar::Real;

/// Base task embedding plus four stage-conditioned tokens.
pub const FUSION_TOKENS: usize = 5;

/// `s / max(n_stages − 1, 1)`: first stage maps to 0, last to 1.
pub fn normalized_stage(stage: usize, n_stages: usize) -> f64 {
    stage as f64 / (n_stages.max(2) - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Width of the task embedding and of every output token.
    pub width: usize,
    pub sincos_width: usize,
    pub learned_width: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { width: 64, sincos_width: 32, learned_width: 32 }
    }
}

/// Stage/task fusion with fixed parameters.
///
/// Produces `[e_τ, f1, f2, f3, f4]`:
/// `f1 = e_τ ⊙ g_task`, `f2 = W5 ReLU(W4 x + b4) + b5`,
/// `f3 = W6 [s_sc ⊙ g_sc ; s_l ⊙ g_l] + b6`, `f4 = [s_sc ; s_l]`,
/// where `x = [e_τ ; s_sc ; s_l]` and every gate is a sigmoid of an affine
/// map of `x`.
#[derive(Clone, Debug)]
pub struct StageFusion<T> {
    pub config: FusionConfig,
    pub n_stages: Vec<usize>,
    task_emb: Matrix<T>,
    /// Row `task * max_stages + stage`.
    stage_emb: Matrix<T>,
    max_stages: usize,
    gate_task: (Matrix<T>, Vec<T>),
    gate_sincos: (Matrix<T>, Vec<T>),
    gate_learned: (Matrix<T>, Vec<T>),
    w4: (Matrix<T>, Vec<T>),
    w5: (Matrix<T>, Vec<T>),
    w6: (Matrix<T>, Vec<T>),
}

fn affine<T: Real, R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> (Matrix<T>, Vec<T>) {
    let s = T::lit((inp as f64).powf(-0.5));
    (Matrix::from_fn(out, inp, |_, _| standard_normal::<T, _>(rng) * s), vec![T::zero(); out])
}

fn apply<T: Real>(layer: &(Matrix<T>, Vec<T>), x: &[T]) -> Vec<T> {
    let mut y = layer.0.matvec(x).expect("fusion layer width");
    for (yi, &b) in y.iter_mut().zip(&layer.1) {
        *yi += b;
    }
    y
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

impl<T: Real> StageFusion<T> {
    pub fn new<R: Rng + ?Sized>(config: FusionConfig, n_stages: Vec<usize>, rng: &mut R) -> Result<Self> {
        if n_stages.is_empty() || n_stages.contains(&0) {
            return Err(Error::Parameter("every task needs at least one stage".into()));
        }
        if config.sincos_width % 2 != 0 {
            return Err(Error::Parameter("sincos width must be even".into()));
        }
        let w = config.width;
        let all = w + config.sincos_width + config.learned_width;
        let max_stages = *n_stages.iter().max().expect("non-empty");
        let task_emb = Matrix::from_fn(n_stages.len(), w, |_, _| standard_normal(rng));
        let stage_emb = Matrix::from_fn(n_stages.len() * max_stages, config.learned_width, |_, _| standard_normal(rng));
        Ok(Self {
            config,
            gate_task: affine(w, all, rng),
            gate_sincos: affine(config.sincos_width, all, rng),
            gate_learned: affine(config.learned_width, all, rng),
            w4: affine(2 * w, all, rng),
            w5: affine(w, 2 * w, rng),
            w6: affine(w, config.sincos_width + config.learned_width, rng),
            n_stages,
            task_emb,
            stage_emb,
            max_stages,
        })
    }

    pub fn output_len(&self) -> usize {
        FUSION_TOKENS * self.config.width
    }

    fn sincos(&self, s_norm: f64) -> Vec<T> {
        let half = self.config.sincos_width / 2;
        let mut out = vec![T::zero(); 2 * half];
        for k in 0..half {
            let freq = std::f64::consts::PI * (k + 1) as f64 / 2.0;
            out[k] = T::lit((freq * s_norm).sin());
            out[half + k] = T::lit((freq * s_norm).cos());
        }
        out
    }

    /// Input vector `x = [e_τ ; s_sc ; s_l]` and its three gates.
    fn inputs(&self, task: usize, stage: usize) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
        let n = *self
            .n_stages
            .get(task)
            .ok_or_else(|| Error::Parameter(format!("unknown task {task}")))?;
        if stage >= n {
            return Err(Error::Parameter(format!("stage {stage} invalid for task {task} with {n} stages")));
        }
        let e = self.task_emb.row(task).to_vec();
        let sc = self.sincos(normalized_stage(stage, n));
        let sl = self.stage_emb.row(task * self.max_stages + stage).to_vec();
        Ok((e, sc, sl))
    }

    /// The five fusion tokens as a `5 × W` matrix.
    pub fn fuse(&self, task: usize, stage: usize) -> Result<Matrix<T>> {
        let (e, sc, sl) = self.inputs(task, stage)?;
        let x: Vec<T> = e.iter().chain(&sc).chain(&sl).copied().collect();
        let g_task: Vec<T> = apply(&self.gate_task, &x).into_iter().map(sigmoid).collect();
        let g_sc: Vec<T> = apply(&self.gate_sincos, &x).into_iter().map(sigmoid).collect();
        let g_l: Vec<T> = apply(&self.gate_learned, &x).into_iter().map(sigmoid).collect();

        let f1: Vec<T> = e.iter().zip(&g_task).map(|(&a, &g)| a * g).collect();
        let hidden: Vec<T> = apply(&self.w4, &x).into_iter().map(|v| v.max(T::zero())).collect();
        let f2 = apply(&self.w5, &hidden);
        let gated: Vec<T> = sc
            .iter()
            .zip(&g_sc)
            .map(|(&a, &g)| a * g)
            .chain(sl.iter().zip(&g_l).map(|(&a, &g)| a * g))
            .collect();
        let f3 = apply(&self.w6, &gated);
        let f4: Vec<T> = sc.iter().chain(&sl).copied().collect();

        let w = self.config.width;
        let mut out = Matrix::zeros(FUSION_TOKENS, w);
        for (r, token) in [&e, &f1, &f2, &f3, &f4].into_iter().enumerate() {
            out.row_mut(r)[..token.len().min(w)].copy_from_slice(&token[..token.len().min(w)]);
        }
        Ok(out)
    }

    /// Gate activations, exposed for range checks.
    pub fn gates(&self, task: usize, stage: usize) -> Result<Vec<T>> {
        let (e, sc, sl) = self.inputs(task, stage)?;
        let x: Vec<T> = e.iter().chain(&sc).chain(&sl).copied().collect();
        Ok([&self.gate_task, &self.gate_sincos, &self.gate_learned]
            .into_iter()
            .flat_map(|g| apply(g, &x).into_iter().map(sigmoid))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn stage_normalization_edges() {
        assert_eq!(normalized_stage(0, 7), 0.0);
        assert_eq!(normalized_stage(6, 7), 1.0);
        assert_eq!(normalized_stage(0, 1), 0.0);
        assert_eq!(normalized_stage(1, 2), 1.0);
    }

    #[test]
    fn output_is_five_tokens_and_gates_in_unit_interval() {
        let f = StageFusion::<f64>::new(FusionConfig::default(), vec![3, 6], &mut stream(1, "fusion")).unwrap();
        let m = f.fuse(1, 4).unwrap();
        assert_eq!(m.shape(), (5, 64));
        assert!(m.all_finite());
        assert!(f.gates(0, 2).unwrap().iter().all(|&g| g > 0.0 && g < 1.0));
        assert!(f.fuse(0, 3).is_err());
        assert!(f.fuse(2, 0).is_err());
    }

    #[test]
    fn different_stages_give_different_tokens() {
        let f = StageFusion::<f64>::new(FusionConfig::default(), vec![4], &mut stream(1, "fusion")).unwrap();
        let a = f.fuse(0, 1).unwrap();
        let b = f.fuse(0, 2).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert!(a.max_abs_diff(&b) > 1e-3);
    }
}
