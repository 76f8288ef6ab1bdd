//! Constraining the leading rows of a new chunk to the previous chunk's
//! unexecuted tail while denoising.

use serde::{Deserialize, Serialize};

use crate::action::ActionChunk;
use crate::correlation::InpaintPartition;
use crate::error::{Error, Result};
use crate::flow::{denoise, denoise_with, VelocityModel};
use crate::scalar::Real;

pub const DEFAULT_TIME_THRESHOLD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InpaintMode {
    /// Hard-set the tail rows and propagate the residual to the free rows
    /// through the conditional-Gaussian regression matrix.
    CorrelationAware,
    /// Hard-set the tail rows only.
    HardOnly,
    /// Ignore the tail.
    Off,
}

impl std::str::FromStr for InpaintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlation-aware" | "corr" => Ok(Self::CorrelationAware),
            "hard-only" | "hard" => Ok(Self::HardOnly),
            "off" | "none" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown inpainting mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintConfig {
    /// Corrections run on Euler steps that start above this time.
    pub time_threshold: f64,
    pub mode: InpaintMode,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self { time_threshold: DEFAULT_TIME_THRESHOLD, mode: InpaintMode::CorrelationAware }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.time_threshold) {
            return Err(Error::Config(format!("inpainting threshold {} outside [0, 1]", self.time_threshold)));
        }
        Ok(())
    }
}

/// Denoises from `eps_start`, pulling the observed (leading) coordinates
/// toward `tail` along the straight noise-to-target path.
///
/// After each Euler step that started at `t > threshold` and landed on
/// `t'`, observed coordinates are set to `(1 − t') tail + t' z` with `z` the
/// observed part of `eps_start`; in correlation-aware mode the change is
/// propagated to the free coordinates. Returns the chunk and the number of
/// corrected steps.
pub fn inpaint_denoise<T, M>(
    model: &M,
    context: &[T],
    eps_start: &ActionChunk<T>,
    tail: Option<&[T]>,
    partition: Option<&InpaintPartition<T>>,
    cfg: &InpaintConfig,
    steps: usize,
) -> Result<(ActionChunk<T>, usize)>
where
    T: Real,
    M: VelocityModel<T> + ?Sized,
{
    cfg.validate()?;
    let tail = match (tail, cfg.mode) {
        (Some(t), InpaintMode::CorrelationAware | InpaintMode::HardOnly) => t,
        _ => return Ok((denoise(model, eps_start, context, steps)?, 0)),
    };
    let part = partition.ok_or_else(|| Error::Config("inpainting requested without a partition".into()))?;
    let n_obs = part.observed.len();
    if tail.len() != n_obs || part.observed.iter().enumerate().any(|(i, &o)| i != o) {
        return Err(Error::Layout(format!(
            "tail of length {} does not match the {n_obs} leading observed coordinates",
            tail.len()
        )));
    }
    let z: Vec<T> = eps_start.flat()[..n_obs].to_vec();
    let threshold = T::lit(cfg.time_threshold);
    let propagate = cfg.mode == InpaintMode::CorrelationAware;
    let mut corrected = 0;
    let mut delta = vec![T::zero(); n_obs];
    let out = denoise_with(model, eps_start, context, steps, |_, t, t_next, x| {
        if t <= threshold {
            return Ok(());
        }
        let flat = x.flat_mut();
        for i in 0..n_obs {
            let desired = (T::one() - t_next) * tail[i] + t_next * z[i];
            delta[i] = desired - flat[i];
            flat[i] = desired;
        }
        if propagate {
            let du = part.propagate(&delta);
            for (&u, d) in part.free.iter().zip(du) {
                flat[u] += d;
            }
        }
        corrected += 1;
        Ok(())
    })?;
    Ok((out, corrected))
}
