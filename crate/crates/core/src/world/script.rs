use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, Episode, EpisodeDataset};
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, standard_normal, CfRng};
use crate::stage::label_stages;

use super::sim::World;
use super::{TaskSpec, WorldSpec, ACTION_DIM, CONTROL_RATE, GRIPPER_DIM, OBS_DIM, VELOCITY_DIMS};

/// Step budget after which a scripted episode counts as stuck.
const MAX_SCRIPT_STEPS: usize = 2000;
const ARRIVE_TOL: f64 = 0.02;
/// Weight of the previous velocity in the controller's low-pass filter.
const SMOOTHING: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Phase {
    Move([f64; 2]),
    Dwell(usize),
    Close,
    Open,
}

/// Per-episode variation of the demonstrator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    /// Offset of the agent's start from the task's start site.
    pub start_offset: [f64; 2],
    pub max_speed: f64,
    pub gain: f64,
    pub sway_amp: f64,
    pub sway_freq: f64,
    pub sway_phase: f64,
    pub noise_seed: u64,
}

impl EpisodeParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            start_offset: [0.015 * standard_normal::<f64, _>(rng), 0.015 * standard_normal::<f64, _>(rng)],
            max_speed: rng.random_range(0.036..0.044),
            gain: rng.random_range(0.23..0.27),
            sway_amp: rng.random_range(0.0..0.03),
            sway_freq: rng.random_range(0.1..0.25),
            sway_phase: rng.random_range(0.0..std::f64::consts::TAU),
            noise_seed: rng.random(),
        }
    }

    pub fn start_in(&self, task: &TaskSpec) -> [f64; 2] {
        [task.start[0] + self.start_offset[0], task.start[1] + self.start_offset[1]]
    }

    pub fn for_episode(root: u64, index: usize) -> Self {
        Self::sample(&mut indexed_stream(root, "episode", index as u64))
    }
}

/// Privileged demonstrator: walks the task's phase list with smoothed
/// velocity commands.
#[derive(Clone, Debug)]
pub struct ScriptedController {
    phases: Vec<Phase>,
    params: EpisodeParams,
    phase: usize,
    in_phase: usize,
    v_prev: [f64; 2],
    grip_cmd: f64,
    t: usize,
    noise: CfRng,
}

impl ScriptedController {
    pub fn new(phases: Vec<Phase>, params: EpisodeParams) -> Self {
        use rand::SeedableRng;
        Self {
            phases,
            params,
            phase: 0,
            in_phase: 0,
            v_prev: [0.0; 2],
            grip_cmd: 1.0,
            t: 0,
            noise: CfRng::seed_from_u64(params.noise_seed),
        }
    }

    pub fn finished(&self) -> bool {
        self.phase >= self.phases.len()
    }

    pub fn phase_index(&self) -> usize {
        self.phase
    }

    fn phase_done(&self, world: &World) -> bool {
        match self.phases[self.phase] {
            Phase::Move(w) => ((world.pos[0] - w[0]).powi(2) + (world.pos[1] - w[1]).powi(2)).sqrt() < ARRIVE_TOL,
            Phase::Dwell(n) => self.in_phase >= n,
            Phase::Close => self.in_phase > 0 && world.grip <= 0.0,
            Phase::Open => self.in_phase > 0 && world.grip >= 1.0,
        }
    }

    /// Next action for the current world state.
    pub fn act(&mut self, world: &World) -> [f64; ACTION_DIM] {
        while !self.finished() && self.phase_done(world) {
            self.phase += 1;
            self.in_phase = 0;
        }
        let mut v_des = [0.0; 2];
        if let Some(&p) = self.phases.get(self.phase) {
            match p {
                Phase::Move(w) => {
                    let d = [w[0] - world.pos[0], w[1] - world.pos[1]];
                    let mut v = [self.params.gain * d[0], self.params.gain * d[1]];
                    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
                    if n > self.params.max_speed {
                        v = [v[0] * self.params.max_speed / n, v[1] * self.params.max_speed / n];
                    }
                    v_des = v;
                }
                Phase::Close => self.grip_cmd = 0.0,
                Phase::Open => self.grip_cmd = 1.0,
                Phase::Dwell(_) => {}
            }
        }
        let v = [
            SMOOTHING * self.v_prev[0] + (1.0 - SMOOTHING) * v_des[0],
            SMOOTHING * self.v_prev[1] + (1.0 - SMOOTHING) * v_des[1],
        ];
        self.v_prev = v;
        let sway = self.params.sway_amp * (self.params.sway_freq * self.t as f64 + self.params.sway_phase).sin();
        let mut joint = |k: usize, sign: f64| {
            0.5 * (world.pos[k] + v[k]) + 2.0 * v[k] + sign * sway + 0.003 * standard_normal::<f64, _>(&mut self.noise)
        };
        let j1 = joint(0, 1.0);
        let j2 = joint(1, -1.0);
        self.in_phase += 1;
        self.t += 1;
        [v[0], v[1], j1, j2, self.grip_cmd]
    }
}

fn round32(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|&x| x as f32)
}

/// Runs the demonstrator on one episode, returning the episode and the
/// number of steps it took.
pub fn demo_episode(spec: &WorldSpec, task: usize, params: EpisodeParams) -> Result<Episode> {
    let ts = spec.task(task)?;
    let mut world = World::new(ts, &spec.landmarks, params.start_in(ts));
    let mut ctl = ScriptedController::new(ts.phases.clone(), params);
    let (mut obs, mut actions, mut joints) = (Vec::new(), Vec::new(), Vec::new());
    let mut len = 0;
    loop {
        let a = ctl.act(&world);
        if ctl.finished() {
            break;
        }
        if len >= MAX_SCRIPT_STEPS {
            return Err(Error::Generation(format!("task {} did not finish within {MAX_SCRIPT_STEPS} steps", ts.name)));
        }
        obs.extend(round32(&world.observe().values));
        joints.extend(round32(&world.joint_state()));
        actions.extend(round32(&a));
        world.step(&a)?;
        len += 1;
    }
    if !world.done() {
        return Err(Error::Generation(format!("scripted run of task {} left conditions unmet", ts.name)));
    }
    let stages = label_stages(len, ts.n_stages)?.into_iter().map(|s| s as u8).collect();
    Ok(Episode { task, obs, actions, joints, stages })
}

/// Scripted demonstrations, cycling through `tasks`.
pub fn generate_demos(spec: &WorldSpec, tasks: &[usize], n_episodes: usize, seed: u64) -> Result<EpisodeDataset> {
    spec.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("no tasks selected".into()));
    }
    let episodes = (0..n_episodes)
        .map(|i| demo_episode(spec, tasks[i % tasks.len()], EpisodeParams::for_episode(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeDataset {
        meta: DatasetMeta {
            action_dim: ACTION_DIM,
            obs_dim: OBS_DIM,
            velocity_dims: VELOCITY_DIMS.to_vec(),
            gripper_dims: vec![GRIPPER_DIM],
            control_rate: CONTROL_RATE,
            tasks: spec.task_infos(),
        },
        episodes,
    })
}
