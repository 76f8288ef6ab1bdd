//! Failed-grasp correction: closing the gripper in a stage where the
//! demonstrations never did is treated as a mistake and undone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::EpisodeDataset;
use crate::error::{Error, Result};

/// Per-dimension gripper range and, per `(task, stage)`, whether each
/// gripper was ever closed in the demonstrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperStats {
    pub gripper_dims: Vec<usize>,
    /// Values below this count as closed (midpoint of the observed range).
    pub closed_below: Vec<f64>,
    /// Fully open command (largest observed value).
    pub open_value: Vec<f64>,
    /// Keyed by `(task, stage)`; one flag per gripper dimension.
    #[serde(with = "pairs")]
    pub closed_seen: BTreeMap<(usize, usize), Vec<bool>>,
}

impl GripperStats {
    /// Scans the demonstrations' gripper commands.
    pub fn fit(ds: &EpisodeDataset) -> Result<Self> {
        Self::fit_with_slack(ds, 0)
    }

    /// Like [`fit`](Self::fit), but a closed command at step `l` also marks
    /// the stages of steps `l - slack ..= l + slack` of the same episode.
    pub fn fit_with_slack(ds: &EpisodeDataset, slack: usize) -> Result<Self> {
        let dims = ds.meta.gripper_dims.clone();
        let d = ds.meta.action_dim;
        if ds.total_steps() == 0 {
            return Err(Error::Estimation("gripper statistics of an empty dataset".into()));
        }
        let mut lo = vec![f64::INFINITY; dims.len()];
        let mut hi = vec![f64::NEG_INFINITY; dims.len()];
        for e in &ds.episodes {
            for l in 0..e.len() {
                let row = e.action_row(d, l);
                for (k, &g) in dims.iter().enumerate() {
                    lo[k] = lo[k].min(row[g] as f64);
                    hi[k] = hi[k].max(row[g] as f64);
                }
            }
        }
        let closed_below: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut closed_seen: BTreeMap<(usize, usize), Vec<bool>> = BTreeMap::new();
        for e in &ds.episodes {
            for l in 0..e.len() {
                closed_seen.entry((e.task, e.stages[l] as usize)).or_insert_with(|| vec![false; dims.len()]);
            }
            for l in 0..e.len() {
                let row = e.action_row(d, l);
                for (k, &g) in dims.iter().enumerate() {
                    if (row[g] as f64) < closed_below[k] {
                        for m in l.saturating_sub(slack)..=(l + slack).min(e.len() - 1) {
                            closed_seen.get_mut(&(e.task, e.stages[m] as usize)).expect("stage registered")[k] = true;
                        }
                    }
                }
            }
        }
        Ok(Self { gripper_dims: dims, closed_below, open_value: hi, closed_seen })
    }

    /// Opens any gripper commanded closed in a `(task, stage)` where the
    /// demonstrations never closed it. Returns the corrected action and
    /// whether anything changed. Unknown pairs pass through untouched.
    pub fn correct(&self, action: &[f64], task: usize, stage: usize) -> (Vec<f64>, bool) {
        let mut out = action.to_vec();
        let Some(flags) = self.closed_seen.get(&(task, stage)) else {
            log::warn!("no gripper statistics for task {task} stage {stage}; leaving action unchanged");
            return (out, false);
        };
        let mut fired = false;
        for (k, &g) in self.gripper_dims.iter().enumerate() {
            if out[g] < self.closed_below[k] && !flags[k] {
                out[g] = self.open_value[k];
                fired = true;
            }
        }
        (out, fired)
    }
}

/// JSON objects need string keys, so the map travels as a list of pairs.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    type Map = BTreeMap<(usize, usize), Vec<bool>>;

    pub fn serialize<S: Serializer>(m: &Map, s: S) -> Result<S::Ok, S::Error> {
        m.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Map, D::Error> {
        Ok(Vec::<((usize, usize), Vec<bool>)>::deserialize(d)?.into_iter().collect())
    }
}
