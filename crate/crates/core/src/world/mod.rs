//! A planar staged-task world.
//!
//! A point agent with a gripper and two auxiliary joints moves in
//! `[-1, 1]²`, picking up and dropping objects at fixed sites. Actions are
//! `[vx, vy, j1, j2, grip]`: body velocity per step, absolute targets for
//! the two joints (which follow the body's motion) and a gripper command in
//! `[0, 1]` where 1 is fully open.
//!
//! Observations carry position, last velocity, joint angles, gripper width
//! and an offset to the nearest site. They do not say whether an object is
//! held, so a task that revisits a site in a different phase is ambiguous
//! from a single observation.

mod encoder;
mod eval;
mod script;
mod sim;

pub use encoder::{Encoder, RBF_GRID};
pub use eval::{
    eval_params, evaluate, rollout, Agent, EpisodeConfig, EpisodeOutcome, EvalReport, GoalReport, ScriptedAgent, TaskScore,
};
pub use script::{demo_episode, generate_demos, EpisodeParams, Phase, ScriptedController};
pub use sim::{Condition, Observation, World};

use serde::{Deserialize, Serialize};

use crate::action::ActionLayout;
use crate::error::{Error, Result};
use crate::stage::TaskInfo;

pub const ACTION_DIM: usize = 5;
pub const VELOCITY_DIMS: [usize; 2] = [0, 1];
pub const JOINT_DIMS: [usize; 2] = [2, 3];
pub const GRIPPER_DIM: usize = 4;
pub const OBS_DIM: usize = 10;
pub const CONTROL_RATE: f64 = 10.0;

pub const HOME: [f64; 2] = [0.0, -0.8];
pub const REACH_RADIUS: f64 = 0.08;
pub const GRASP_RADIUS: f64 = 0.1;
pub const VIEW_RADIUS: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub start: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Where the agent starts, before the per-episode offset.
    pub start: [f64; 2],
    pub n_stages: usize,
    pub objects: Vec<ObjectSpec>,
    pub phases: Vec<Phase>,
    pub conditions: Vec<Condition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub tasks: Vec<TaskSpec>,
    /// Fixed sites visible through the local view.
    pub landmarks: Vec<[f64; 2]>,
}

impl WorldSpec {
    /// Four tasks: a two-site visit, two pick-and-place variants, and a
    /// carry-and-return task that starts where it later puts the object
    /// back, so its first and late stages look identical.
    pub fn standard() -> Self {
        let a0 = [-0.6, 0.2];
        let b0 = [0.5, 0.6];
        let o1 = [0.6, -0.2];
        let p1 = [-0.3, 0.7];
        let radio = [-0.5, -0.3];
        let shelf = [0.4, 0.2];
        let detour = [-0.2, -0.55];
        let o3 = [0.0, 0.5];
        let p3 = [0.7, 0.7];
        let q3 = [-0.7, 0.7];
        let obj = |name: &str, start| ObjectSpec { name: name.into(), start };
        let tasks = vec![
            TaskSpec {
                name: "visit".into(),
                start: HOME,
                n_stages: 4,
                objects: vec![],
                phases: vec![Phase::Move(a0), Phase::Dwell(4), Phase::Move(b0), Phase::Dwell(4)],
                conditions: vec![
                    Condition::Reach { at: a0, after: None },
                    Condition::Reach { at: b0, after: Some(0) },
                ],
            },
            TaskSpec {
                name: "pick-place".into(),
                start: HOME,
                n_stages: 5,
                objects: vec![obj("cup", o1)],
                phases: vec![Phase::Move(o1), Phase::Dwell(2), Phase::Close, Phase::Move(p1), Phase::Open, Phase::Dwell(3)],
                conditions: vec![
                    Condition::Grasped { object: 0, after: None },
                    Condition::Placed { object: 0, at: p1, after: Some(0) },
                ],
            },
            TaskSpec {
                name: "radio".into(),
                start: [-0.49, -0.31],
                n_stages: 6,
                objects: vec![obj("radio", radio)],
                phases: vec![
                    Phase::Move(radio),
                    Phase::Dwell(4),
                    Phase::Close,
                    Phase::Dwell(8),
                    Phase::Move(shelf),
                    Phase::Dwell(20),
                    Phase::Move(detour),
                    Phase::Move(radio),
                    Phase::Dwell(8),
                    Phase::Open,
                    Phase::Dwell(20),
                    Phase::Move(HOME),
                    Phase::Dwell(10),
                ],
                conditions: vec![
                    Condition::HeldAt { object: 0, at: shelf, steps: 4, after: None },
                    Condition::Placed { object: 0, at: radio, after: Some(0) },
                    Condition::Reach { at: HOME, after: Some(1) },
                ],
            },
            TaskSpec {
                name: "pick-place-reach".into(),
                start: HOME,
                n_stages: 5,
                objects: vec![obj("box", o3)],
                phases: vec![
                    Phase::Move(o3),
                    Phase::Dwell(2),
                    Phase::Close,
                    Phase::Move(p3),
                    Phase::Open,
                    Phase::Move(q3),
                    Phase::Dwell(3),
                ],
                conditions: vec![
                    Condition::Grasped { object: 0, after: None },
                    Condition::Placed { object: 0, at: p3, after: Some(0) },
                    Condition::Reach { at: q3, after: Some(1) },
                ],
            },
        ];
        Self { tasks, landmarks: vec![a0, b0, o1, p1, radio, shelf, detour, o3, p3, q3, HOME] }
    }

    pub fn layout(horizon: usize) -> Result<ActionLayout> {
        ActionLayout::new(horizon, ACTION_DIM, VELOCITY_DIMS.to_vec(), vec![GRIPPER_DIM], CONTROL_RATE)
    }

    pub fn task(&self, id: usize) -> Result<&TaskSpec> {
        self.tasks.get(id).ok_or_else(|| Error::Config(format!("unknown task {id}")))
    }

    pub fn task_infos(&self) -> Vec<TaskInfo> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(id, t)| TaskInfo { id, name: t.name.clone(), n_stages: t.n_stages })
            .collect()
    }

    /// First task that returns to a site it has already been at (its start
    /// included), i.e. one a stage-blind policy cannot disambiguate.
    pub fn ambiguous_task(&self) -> Option<usize> {
        self.tasks.iter().position(|t| {
            let moves = t.phases.iter().filter_map(|p| if let Phase::Move(w) = p { Some(*w) } else { None });
            let sites: Vec<[f64; 2]> = std::iter::once(t.start).chain(moves).collect();
            sites.iter().enumerate().any(|(i, a)| sites[i + 1..].contains(a))
        })
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.tasks {
            for p in &t.phases {
                if let Phase::Move(w) = p {
                    if w.iter().any(|c| !c.is_finite() || c.abs() > 1.0) {
                        return Err(Error::Generation(format!("task {}: waypoint {w:?} outside the workspace", t.name)));
                    }
                }
            }
            for (i, c) in t.conditions.iter().enumerate() {
                if c.after().is_some_and(|a| a >= i) {
                    return Err(Error::Generation(format!("task {}: condition {i} depends on a later one", t.name)));
                }
            }
        }
        if self.ambiguous_task().is_none() {
            return Err(Error::Generation("no task revisits a site".into()));
        }
        Ok(())
    }
}
