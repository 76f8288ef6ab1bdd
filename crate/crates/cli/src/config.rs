//! Key-value run configuration: built-in defaults, then the `--config`
//! file, then command-line overrides.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use corrflow::flow::train::TrainConfig;
use corrflow::inference::{EngineConfig, InpaintConfig, InpaintMode};
use corrflow::policy::{NoiseKind, PolicyConfig, STAGE_SLACK};
use corrflow::stage::{FusionConfig, HeadTrainConfig};
use corrflow::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub tasks: Vec<usize>,
    pub demo_episodes: usize,
    pub eval_episodes: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub beta: f64,
    pub noise: NoiseKind,
    pub samples: usize,
    pub denoise_steps: usize,
    pub execute_count: usize,
    pub save_tail: usize,
    pub threshold: f64,
    pub inpaint: InpaintMode,
    pub speedup: f64,
    pub compression: bool,
    pub gripper_change_threshold: f64,
    pub gripper_rule: bool,
    pub stage_tracking: bool,
    pub reanchor: bool,
    pub hidden: usize,
    pub fusion_width: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub head_steps: usize,
    pub head_learning_rate: f64,
    pub head_weight_decay: f64,
    pub stage_jitter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let head = HeadTrainConfig::default();
        Self {
            seed: 0,
            tasks: vec![0, 1, 2, 3],
            demo_episodes: 200,
            eval_episodes: 20,
            horizon: 30,
            action_dim: corrflow::world::ACTION_DIM,
            beta: corrflow::correlation::DEFAULT_BETA,
            noise: NoiseKind::Correlated,
            samples: corrflow::flow::DEFAULT_SAMPLES,
            denoise_steps: corrflow::flow::DEFAULT_STEPS,
            execute_count: 26,
            save_tail: 4,
            threshold: corrflow::inference::DEFAULT_TIME_THRESHOLD,
            inpaint: InpaintMode::CorrelationAware,
            speedup: 1.3,
            compression: true,
            gripper_change_threshold: 0.5,
            gripper_rule: true,
            stage_tracking: true,
            reanchor: true,
            hidden: 128,
            fusion_width: 64,
            train_steps: train.steps,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            grad_clip: train.grad_clip.unwrap_or(0.0),
            head_steps: head.steps,
            head_learning_rate: head.learning_rate,
            head_weight_decay: head.weight_decay,
            stage_jitter: STAGE_SLACK,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

pub fn parse_tasks(value: &str) -> Result<Vec<usize>> {
    let tasks = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse::<usize>("tasks", s))
        .collect::<Result<Vec<_>>>()?;
    if tasks.is_empty() {
        return Err(Error::Config("tasks: empty list".into()));
    }
    Ok(tasks)
}

fn mode_name(m: InpaintMode) -> &'static str {
    match m {
        InpaintMode::CorrelationAware => "correlation-aware",
        InpaintMode::HardOnly => "hard-only",
        InpaintMode::Off => "off",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "tasks" => self.tasks = parse_tasks(value)?,
            "demo_episodes" => self.demo_episodes = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "action_dim" => self.action_dim = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "noise" => self.noise = value.trim().parse()?,
            "samples" => self.samples = parse(key, value)?,
            "denoise_steps" => self.denoise_steps = parse(key, value)?,
            "execute_count" => self.execute_count = parse(key, value)?,
            "save_tail" => self.save_tail = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "inpaint" => self.inpaint = value.trim().parse()?,
            "speedup" => self.speedup = parse(key, value)?,
            "compression" => self.compression = parse_bool(key, value)?,
            "gripper_change_threshold" => self.gripper_change_threshold = parse(key, value)?,
            "gripper_rule" => self.gripper_rule = parse_bool(key, value)?,
            "stage_tracking" => self.stage_tracking = parse_bool(key, value)?,
            "reanchor" => self.reanchor = parse_bool(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "fusion_width" => self.fusion_width = parse(key, value)?,
            "train_steps" => self.train_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "head_steps" => self.head_steps = parse(key, value)?,
            "head_learning_rate" => self.head_learning_rate = parse(key, value)?,
            "head_weight_decay" => self.head_weight_decay = parse(key, value)?,
            "stage_jitter" => self.stage_jitter = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let tasks: Vec<String> = self.tasks.iter().map(|t| t.to_string()).collect();
        let noise = match self.noise {
            NoiseKind::Correlated => "correlated",
            NoiseKind::Identity => "identity",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("tasks", tasks.join(",")),
            ("demo_episodes", self.demo_episodes.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("horizon", self.horizon.to_string()),
            ("action_dim", self.action_dim.to_string()),
            ("beta", self.beta.to_string()),
            ("noise", noise.to_string()),
            ("samples", self.samples.to_string()),
            ("denoise_steps", self.denoise_steps.to_string()),
            ("execute_count", self.execute_count.to_string()),
            ("save_tail", self.save_tail.to_string()),
            ("threshold", self.threshold.to_string()),
            ("inpaint", mode_name(self.inpaint).to_string()),
            ("speedup", self.speedup.to_string()),
            ("compression", self.compression.to_string()),
            ("gripper_change_threshold", self.gripper_change_threshold.to_string()),
            ("gripper_rule", self.gripper_rule.to_string()),
            ("stage_tracking", self.stage_tracking.to_string()),
            ("reanchor", self.reanchor.to_string()),
            ("hidden", self.hidden.to_string()),
            ("fusion_width", self.fusion_width.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("head_steps", self.head_steps.to_string()),
            ("head_learning_rate", self.head_learning_rate.to_string()),
            ("head_weight_decay", self.head_weight_decay.to_string()),
            ("stage_jitter", self.stage_jitter.to_string()),
        ]
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_dim != corrflow::world::ACTION_DIM {
            return Err(Error::Config(format!(
                "action_dim {} does not match the world's {}",
                self.action_dim,
                corrflow::world::ACTION_DIM
            )));
        }
        if self.save_tail + self.execute_count != self.horizon {
            return Err(Error::Config(format!(
                "save_tail {} + execute_count {} must equal horizon {}",
                self.save_tail, self.execute_count, self.horizon
            )));
        }
        if !(self.speedup >= 1.0) {
            return Err(Error::Config(format!("speedup {} must be at least 1", self.speedup)));
        }
        if self.fusion_width < 2 || self.fusion_width % 4 != 0 {
            return Err(Error::Config("fusion_width must be a positive multiple of 4".into()));
        }
        self.policy_config().validate()?;
        Ok(())
    }

    pub fn out_steps(&self) -> usize {
        ((self.execute_count as f64 / self.speedup).round() as usize).max(2)
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let half = self.fusion_width / 2;
        PolicyConfig {
            horizon: self.horizon,
            hidden: self.hidden,
            beta: self.beta,
            noise: self.noise,
            fusion: FusionConfig { width: self.fusion_width, sincos_width: half, learned_width: half },
            train: TrainConfig {
                steps: self.train_steps,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                momentum: self.momentum,
                grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
                samples: self.samples,
            },
            head: HeadTrainConfig {
                steps: self.head_steps,
                learning_rate: self.head_learning_rate,
                weight_decay: self.head_weight_decay,
                ..HeadTrainConfig::default()
            },
            stage_jitter: self.stage_jitter,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            save_tail: self.save_tail,
            execute: self.execute_count,
            out_steps: self.out_steps(),
            denoise_steps: self.denoise_steps,
            inpaint: InpaintConfig { time_threshold: self.threshold, mode: self.inpaint },
            compression: self.compression,
            gripper_change_threshold: self.gripper_change_threshold,
            gripper_rule: self.gripper_rule,
            stage_tracking: self.stage_tracking,
            reanchor: self.reanchor,
            fault: None,
            seed: corrflow::rng::derive_seed(self.seed, "engine"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# desk\nhorizon = 12\nexecute_count=8 # rows\ntasks = 1,2\nstage_tracking = off\n").unwrap();
        assert_eq!((c.horizon, c.execute_count, c.tasks.clone(), c.stage_tracking), (12, 8, vec![1, 2], false));
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("beta", "x"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("horizon 12"), Err(Error::Config(_))));
        c.horizon = 12;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_are_consistent() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.out_steps(), 20);
    }
}
