//! Demonstration episodes and their on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one binary file per
//! episode containing, back to back and little-endian:
//! observations (`f32`, `len × obs_dim`), actions (`f32`, `len × action_dim`),
//! joint states (`f32`, `len × action_dim`) and stage labels (`u8`, `len`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage::TaskInfo;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "corrflow-episodes";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: usize,
    pub obs: Vec<f32>,
    pub actions: Vec<f32>,
    pub joints: Vec<f32>,
    pub stages: Vec<u8>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn obs_row(&self, obs_dim: usize, l: usize) -> &[f32] {
        &self.obs[l * obs_dim..(l + 1) * obs_dim]
    }

    pub fn action_row(&self, dim: usize, l: usize) -> &[f32] {
        &self.actions[l * dim..(l + 1) * dim]
    }

    pub fn joint_row(&self, dim: usize, l: usize) -> &[f32] {
        &self.joints[l * dim..(l + 1) * dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub action_dim: usize,
    pub obs_dim: usize,
    pub velocity_dims: Vec<usize>,
    pub gripper_dims: Vec<usize>,
    pub control_rate: f64,
    pub tasks: Vec<TaskInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeDataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<Episode>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeEntry {
    file: String,
    task: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(flatten)]
    meta: DatasetMeta,
    episodes: Vec<EpisodeEntry>,
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn take_f32s(bytes: &[u8], n: usize, at: &mut usize) -> Vec<f32> {
    let out = bytes[*at..*at + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *at += 4 * n;
    out
}

impl EpisodeDataset {
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        for (i, e) in self.episodes.iter().enumerate() {
            let len = e.len();
            if e.obs.len() != len * m.obs_dim || e.actions.len() != len * m.action_dim || e.joints.len() != len * m.action_dim {
                return Err(Error::Format(format!("episode {i} arrays disagree with its length {len}")));
            }
            let task = m.tasks.get(e.task).ok_or_else(|| Error::Format(format!("episode {i} has unknown task {}", e.task)))?;
            if e.stages.iter().any(|&s| s as usize >= task.n_stages) {
                return Err(Error::Format(format!("episode {i} has a stage label outside its task")));
            }
        }
        Ok(())
    }

    fn episode_bytes(e: &Episode) -> Vec<u8> {
        let mut buf = Vec::with_capacity(4 * (e.obs.len() + e.actions.len() + e.joints.len()) + e.stages.len());
        put_f32s(&mut buf, &e.obs);
        put_f32s(&mut buf, &e.actions);
        put_f32s(&mut buf, &e.joints);
        buf.extend_from_slice(&e.stages);
        buf
    }

    /// Writes the dataset into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.episodes.len());
        for (i, e) in self.episodes.iter().enumerate() {
            let file = format!("episode_{i:05}.bin");
            fs::write(dir.join(&file), Self::episode_bytes(e))?;
            entries.push(EpisodeEntry { file, task: e.task, len: e.len() });
        }
        let manifest = Manifest { format: FORMAT.into(), version: VERSION, meta: self.meta.clone(), episodes: entries };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let m = &manifest.meta;
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for entry in &manifest.episodes {
            let bytes = fs::read(dir.join(&entry.file))?;
            let len = entry.len;
            let expect = 4 * len * (m.obs_dim + 2 * m.action_dim) + len;
            if bytes.len() != expect {
                return Err(Error::Format(format!(
                    "{} has {} bytes, manifest implies {expect}",
                    entry.file,
                    bytes.len()
                )));
            }
            let mut at = 0;
            let obs = take_f32s(&bytes, len * m.obs_dim, &mut at);
            let actions = take_f32s(&bytes, len * m.action_dim, &mut at);
            let joints = take_f32s(&bytes, len * m.action_dim, &mut at);
            let stages = bytes[at..].to_vec();
            episodes.push(Episode { task: entry.task, obs, actions, joints, stages });
        }
        let ds = Self { meta: manifest.meta, episodes };
        ds.validate()?;
        Ok(ds)
    }

    /// Order-sensitive 64-bit digest of every stored value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::Fnv::new();
        h.write(serde_json::to_string(&self.meta).unwrap_or_default().as_bytes());
        for e in &self.episodes {
            h.write(&(e.task as u64).to_le_bytes());
            h.write(&Self::episode_bytes(e));
        }
        h.finish()
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EpisodeDataset {
        EpisodeDataset {
            meta: DatasetMeta {
                action_dim: 2,
                obs_dim: 3,
                velocity_dims: vec![0],
                gripper_dims: vec![],
                control_rate: 10.0,
                tasks: vec![TaskInfo { id: 0, name: "a".into(), n_stages: 2 }],
            },
            episodes: vec![Episode {
                task: 0,
                obs: (0..9).map(|x| x as f32 * 0.5).collect(),
                actions: vec![1.0, -1.0, 0.25, 3.0, -0.5, 7.0],
                joints: vec![0.0; 6],
                stages: vec![0, 1, 1],
            }],
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join(format!("corrflow-ds-{}", std::process::id()));
        let ds = tiny();
        ds.save(&dir).unwrap();
        let back = EpisodeDataset::load(&dir).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.fingerprint(), ds.fingerprint());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn invalid_labels_rejected() {
        let mut ds = tiny();
        ds.episodes[0].stages[2] = 2;
        assert!(matches!(ds.validate(), Err(Error::Format(_))));
    }
}
