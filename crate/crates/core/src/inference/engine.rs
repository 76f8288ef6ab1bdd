use serde::{Deserialize, Serialize};

use crate::action::from_delta;
use crate::correlation::InpaintPartition;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policy::Policy;
use crate::rng::{indexed_stream, CfRng};
use crate::stage::{StageEvent, StageTracker};
use crate::world::{Agent, EpisodeParams, Observation, World, ACTION_DIM};

use super::inpaint::{inpaint_denoise, InpaintConfig};
use super::spline::{compress, should_compress, CompressionConfig};

/// Scripted fault: the gripper command is forced to `value` for `steps`
/// emitted actions starting at episode step `after`, but only while the
/// tracked stage is `stage`. Applied before the gripper rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub tasks: Vec<usize>,
    pub stage: usize,
    pub after: usize,
    pub steps: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Unexecuted rows carried into the next cycle.
    pub save_tail: usize,
    pub execute: usize,
    /// Emitted steps per cycle when compression applies.
    pub out_steps: usize,
    pub denoise_steps: usize,
    pub inpaint: InpaintConfig,
    pub compression: bool,
    pub gripper_change_threshold: f64,
    pub gripper_rule: bool,
    pub stage_tracking: bool,
    /// Re-express the saved tail against the new joint state.
    pub reanchor: bool,
    pub fault: Option<FaultInjection>,
    pub seed: u64,
}

impl EngineConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            save_tail: 4,
            execute: 8,
            out_steps: 6,
            denoise_steps: crate::flow::DEFAULT_STEPS,
            inpaint: InpaintConfig::default(),
            compression: true,
            gripper_change_threshold: 0.5,
            gripper_rule: true,
            stage_tracking: true,
            reanchor: true,
            fault: None,
            seed,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.save_tail + self.execute != horizon {
            return Err(Error::Config(format!(
                "saved tail {} plus executed {} must equal the horizon {horizon}",
                self.save_tail, self.execute
            )));
        }
        if self.save_tail == 0 || self.execute == 0 {
            return Err(Error::Config("saved tail and executed rows must both be non-empty".into()));
        }
        self.inpaint.validate()
    }
}

/// One prediction cycle, as written to the trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub episode: usize,
    pub cycle: usize,
    pub timestep: usize,
    pub raw_stage: usize,
    pub stage: usize,
    pub threshold_hits: usize,
    pub boundary_jump: Option<f64>,
    pub compressed: bool,
    pub gripper_corrections: usize,
    pub faults: usize,
    pub emitted: usize,
}

/// Largest change over `dims` between the last action of one cycle and the
/// first of the next.
pub fn boundary_jump(prev_last: &[f64], next_first: &[f64], dims: &[usize]) -> f64 {
    dims.iter().map(|&d| (next_first[d] - prev_last[d]).abs()).fold(0.0, f64::max)
}

struct Tail {
    rows: Vec<f64>,
    q: Vec<f64>,
}

/// The closed-loop chunk policy as an [`Agent`].
pub struct Engine<'a> {
    policy: &'a Policy,
    config: EngineConfig,
    partition: InpaintPartition<f64>,
    compression: CompressionConfig,
    task: usize,
    tracker: StageTracker,
    stage: usize,
    tail: Option<Tail>,
    last: Option<Vec<f64>>,
    rng: CfRng,
    cycle: usize,
    t: usize,
    episode: Option<usize>,
    traces: Vec<CycleTrace>,
    events: Vec<StageEvent>,
}

impl<'a> Engine<'a> {
    pub fn new(policy: &'a Policy, config: EngineConfig) -> Result<Self> {
        let layout = policy.layout();
        config.validate(layout.horizon)?;
        let compression = CompressionConfig {
            in_steps: config.execute,
            out_steps: config.out_steps,
            velocity_dims: layout.velocity_dims.clone(),
            gripper_dims: layout.gripper_dims.clone(),
            gripper_change_threshold: config.gripper_change_threshold,
        };
        if config.compression {
            compression.validate()?;
        }
        Ok(Self {
            partition: policy.correlation.build_partition(config.save_tail)?,
            compression,
            rng: indexed_stream(config.seed, "engine", 0),
            config,
            policy,
            task: 0,
            tracker: StageTracker::new(1),
            stage: 0,
            tail: None,
            last: None,
            cycle: 0,
            t: 0,
            episode: None,
            traces: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn traces(&self) -> &[CycleTrace] {
        &self.traces
    }

    pub fn events(&self) -> &[StageEvent] {
        &self.events
    }

    pub fn take_traces(&mut self) -> Vec<CycleTrace> {
        std::mem::take(&mut self.traces)
    }

    pub fn take_events(&mut self) -> Vec<StageEvent> {
        std::mem::take(&mut self.events)
    }

    /// Saved tail expressed in the coordinates of the next chunk's rows
    /// `0..k`.
    fn constraint(&self, q: &[f64]) -> Option<Vec<f64>> {
        let tail = self.tail.as_ref()?;
        if !self.config.reanchor {
            return Some(tail.rows.clone());
        }
        let stats = &self.policy.data.stats;
        let layout = self.policy.layout();
        let (h, k, d) = (layout.horizon, self.config.save_tail, layout.dim);
        let joints = layout.joint_dims();
        let mut out = Vec::with_capacity(k * d);
        for i in 0..k {
            let mut phys = stats.denormalize_row(h - k + i, &tail.rows[i * d..(i + 1) * d]);
            for &j in &joints {
                phys[j] += tail.q[j] - q[j];
            }
            out.extend(stats.normalize_row(i, &phys));
        }
        Some(out)
    }

    /// One full prediction cycle; returns the actions to execute.
    pub fn step_policy(&mut self, obs: &Observation) -> Result<Vec<[f64; ACTION_DIM]>> {
        let policy = self.policy;
        let layout = policy.layout();
        let (h, d, k) = (layout.horizon, layout.dim, self.config.save_tail);
        let q: Vec<f64> = obs.values[2..2 + ACTION_DIM].to_vec();

        let features = policy.features(&obs.values);
        let (_, raw) = policy.predict_stage(self.task, &features)?;
        let stage = if self.config.stage_tracking { self.tracker.vote(raw) } else { raw };
        self.events.push(StageEvent {
            episode: self.episode.unwrap_or(0),
            timestep: self.t,
            raw,
            stage,
            transition: stage != self.stage,
        });
        self.stage = stage;
        let context = policy.context(self.task, stage, &features)?;

        let eps = policy.correlation.sample_noise(&mut self.rng);
        let constraint = self.constraint(&q);
        let (x, hits) = inpaint_denoise(
            &policy.model,
            &context,
            &eps,
            constraint.as_deref(),
            Some(&self.partition),
            &self.config.inpaint,
            self.config.denoise_steps,
        )?;
        let absolute = from_delta(layout, &policy.data.stats.denormalize(&x)?, &q)?;
        self.tail = Some(Tail { rows: x.flat()[(h - k) * d..].to_vec(), q: q.clone() });

        let rows: Vec<usize> = (0..self.config.execute).collect();
        let cols: Vec<usize> = (0..d).collect();
        let executed = absolute.matrix().select(&rows, &cols);
        let compressed = self.config.compression && should_compress(&x.matrix().select(&rows, &cols), &self.compression);
        let emitted: Matrix<f64> = if compressed { compress(&executed, &self.compression)? } else { executed };

        let mut out: Vec<[f64; ACTION_DIM]> = Vec::with_capacity(emitted.rows());
        let (mut corrections, mut faults) = (0, 0);
        for i in 0..emitted.rows() {
            let mut a = emitted.row(i).to_vec();
            if let Some(f) = &self.config.fault {
                if f.tasks.contains(&self.task) && stage == f.stage && (f.after..f.after + f.steps).contains(&self.t) {
                    for &g in &layout.gripper_dims {
                        a[g] = f.value;
                    }
                    faults += 1;
                }
            }
            if self.config.gripper_rule {
                let (fixed, fired) = policy.data.gripper.correct(&a, self.task, stage);
                a = fixed;
                corrections += usize::from(fired);
            }
            out.push(<[f64; ACTION_DIM]>::try_from(a).map_err(|_| Error::Layout("policy action width differs from the world".into()))?);
            self.t += 1;
        }
        if out.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { step: self.t, message: "non-finite action from the policy".into() });
        }
        let jump = self.last.as_ref().map(|prev| boundary_jump(prev, &out[0], &layout.joint_dims()));
        self.last = out.last().map(|a| a.to_vec());
        self.traces.push(CycleTrace {
            episode: self.episode.unwrap_or(0),
            cycle: self.cycle,
            timestep: self.t - out.len(),
            raw_stage: raw,
            stage,
            threshold_hits: hits,
            boundary_jump: jump,
            compressed,
            gripper_corrections: corrections,
            faults,
            emitted: out.len(),
        });
        self.cycle += 1;
        Ok(out)
    }
}

impl Agent for Engine<'_> {
    fn reset(&mut self, task: usize, params: &EpisodeParams) -> Result<()> {
        self.tracker = StageTracker::new(self.policy.n_stages(task)?);
        self.task = task;
        self.stage = 0;
        self.tail = None;
        self.last = None;
        self.cycle = 0;
        self.t = 0;
        self.episode = Some(self.episode.map_or(0, |e| e + 1));
        self.rng = indexed_stream(self.config.seed, "engine", params.noise_seed);
        Ok(())
    }

    fn act(&mut self, obs: &Observation, _world: &World) -> Result<Vec<[f64; ACTION_DIM]>> {
        self.step_policy(obs)
    }
}
