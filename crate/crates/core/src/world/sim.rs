use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{TaskSpec, ACTION_DIM, GRASP_RADIUS, OBS_DIM, REACH_RADIUS, VIEW_RADIUS};

/// Speed cap applied by the world regardless of the command.
pub const MAX_SPEED: f64 = 0.06;
/// Largest gripper change per step.
pub const GRIP_RATE: f64 = 0.25;
const JOINT_LIMIT: f64 = 2.0;

/// A goal predicate, counted only once its prerequisite (if any) holds.
/// `Placed` is a state and is lost again if the object is picked back up;
/// the others are events and stay satisfied once reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Reach { at: [f64; 2], after: Option<usize> },
    Grasped { object: usize, after: Option<usize> },
    /// Object resting (not held) near a site.
    Placed { object: usize, at: [f64; 2], after: Option<usize> },
    /// Object held near a site for a number of consecutive steps.
    HeldAt { object: usize, at: [f64; 2], steps: usize, after: Option<usize> },
}

impl Condition {
    pub fn after(&self) -> Option<usize> {
        match self {
            Condition::Reach { after, .. }
            | Condition::Grasped { after, .. }
            | Condition::Placed { after, .. }
            | Condition::HeldAt { after, .. } => *after,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub values: [f64; OBS_DIM],
}

impl Observation {
    pub fn position(&self) -> [f64; 2] {
        [self.values[0], self.values[1]]
    }

    pub fn gripper(&self) -> f64 {
        self.values[6]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug)]
pub struct World {
    task: TaskSpec,
    landmarks: Vec<[f64; 2]>,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub joints: [f64; 2],
    pub grip: f64,
    pub objects: Vec<[f64; 2]>,
    pub carried: Option<usize>,
    satisfied: Vec<bool>,
    held_for: Vec<usize>,
    steps: usize,
    distance: f64,
}

impl World {
    pub fn new(task: &TaskSpec, landmarks: &[[f64; 2]], start: [f64; 2]) -> Self {
        let mut w = Self {
            task: task.clone(),
            landmarks: landmarks.to_vec(),
            pos: start,
            vel: [0.0; 2],
            joints: [0.5 * start[0], 0.5 * start[1]],
            grip: 1.0,
            objects: task.objects.iter().map(|o| o.start).collect(),
            carried: None,
            satisfied: vec![false; task.conditions.len()],
            held_for: vec![0; task.conditions.len()],
            steps: 0,
            distance: 0.0,
        };
        w.update_conditions();
        w
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn satisfied(&self) -> &[bool] {
        &self.satisfied
    }

    pub fn done(&self) -> bool {
        self.satisfied.iter().all(|&s| s)
    }

    /// Current joint-state vector in action coordinates.
    pub fn joint_state(&self) -> [f64; ACTION_DIM] {
        [self.vel[0], self.vel[1], self.joints[0], self.joints[1], self.grip]
    }

    pub fn observe(&self) -> Observation {
        let mut v = [0.0; OBS_DIM];
        v[0] = self.pos[0];
        v[1] = self.pos[1];
        v[2] = self.vel[0];
        v[3] = self.vel[1];
        v[4] = self.joints[0];
        v[5] = self.joints[1];
        v[6] = self.grip;
        let nearest = self
            .landmarks
            .iter()
            .map(|&l| (dist(l, self.pos), l))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((d, l)) = nearest {
            if d < VIEW_RADIUS {
                v[7] = l[0] - self.pos[0];
                v[8] = l[1] - self.pos[1];
                v[9] = 1.0;
            }
        }
        Observation { values: v }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<()> {
        if action.len() != ACTION_DIM {
            return Err(Error::Layout(format!("world action has {} entries, expected {ACTION_DIM}", action.len())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numerical { step: self.steps, message: "non-finite action".into() });
        }
        let mut v = [action[0], action[1]];
        let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if speed > MAX_SPEED {
            v = [v[0] * MAX_SPEED / speed, v[1] * MAX_SPEED / speed];
        }
        let before = self.pos;
        self.pos = [(self.pos[0] + v[0]).clamp(-1.0, 1.0), (self.pos[1] + v[1]).clamp(-1.0, 1.0)];
        self.vel = [self.pos[0] - before[0], self.pos[1] - before[1]];
        self.distance += dist(before, self.pos);
        self.joints = [action[2].clamp(-JOINT_LIMIT, JOINT_LIMIT), action[3].clamp(-JOINT_LIMIT, JOINT_LIMIT)];

        let was_open = self.grip >= 0.5;
        let target = action[4].clamp(0.0, 1.0);
        self.grip += (target - self.grip).clamp(-GRIP_RATE, GRIP_RATE);
        let is_open = self.grip >= 0.5;
        if was_open && !is_open && self.carried.is_none() {
            self.carried = self
                .objects
                .iter()
                .enumerate()
                .map(|(i, &o)| (dist(o, self.pos), i))
                .filter(|(d, _)| *d < GRASP_RADIUS)
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, i)| i);
        } else if !was_open && is_open {
            self.carried = None;
        }
        if let Some(i) = self.carried {
            self.objects[i] = self.pos;
        }
        self.steps += 1;
        self.update_conditions();
        Ok(())
    }

    fn update_conditions(&mut self) {
        for i in 0..self.satisfied.len() {
            let c = &self.task.conditions[i];
            let ready = c.after().is_none_or(|a| self.satisfied[a]);
            let now = match *c {
                Condition::Reach { at, .. } => dist(self.pos, at) < REACH_RADIUS,
                Condition::Grasped { object, .. } => self.carried == Some(object),
                Condition::Placed { object, at, .. } => {
                    self.carried != Some(object) && dist(self.objects[object], at) < REACH_RADIUS
                }
                Condition::HeldAt { object, at, steps, .. } => {
                    let held = self.carried == Some(object) && dist(self.pos, at) < REACH_RADIUS;
                    self.held_for[i] = if held && ready { self.held_for[i] + 1 } else { 0 };
                    self.held_for[i] >= steps
                }
            };
            if matches!(c, Condition::Placed { .. }) {
                self.satisfied[i] = ready && now;
            } else if ready && now {
                self.satisfied[i] = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::WorldSpec;
    use super::*;

    #[test]
    fn grasp_carry_release() {
        let spec = WorldSpec::standard();
        let task = spec.task(1).unwrap();
        let start = task.objects[0].start;
        let mut w = World::new(task, &spec.landmarks, start);
        for _ in 0..4 {
            w.step(&[0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        }
        assert_eq!(w.carried, Some(0));
        assert!(w.satisfied()[0]);
        w.step(&[0.05, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(w.objects[0], w.pos);
        for _ in 0..4 {
            w.step(&[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        }
        assert_eq!(w.carried, None);
    }

    #[test]
    fn closing_in_empty_air_grasps_nothing() {
        let spec = WorldSpec::standard();
        let mut w = World::new(spec.task(1).unwrap(), &spec.landmarks, [0.0, -0.8]);
        for _ in 0..4 {
            w.step(&[0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        }
        assert_eq!(w.carried, None);
        assert!(!w.satisfied()[0]);
    }

    #[test]
    fn speed_is_capped_and_nan_rejected() {
        let spec = WorldSpec::standard();
        let mut w = World::new(spec.task(0).unwrap(), &spec.landmarks, [0.0, 0.0]);
        w.step(&[1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((w.pos[0] - MAX_SPEED).abs() < 1e-15);
        assert!(matches!(w.step(&[f64::NAN, 0.0, 0.0, 0.0, 1.0]), Err(Error::Numerical { .. })));
    }

    #[test]
    fn prerequisites_gate_conditions() {
        let spec = WorldSpec::standard();
        let task = spec.task(0).unwrap();
        // start on the second site: it does not count before the first
        let w = World::new(task, &spec.landmarks, [0.5, 0.6]);
        assert_eq!(w.satisfied(), &[false, false]);
    }
}
