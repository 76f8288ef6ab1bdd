use super::sim::Observation;
use super::OBS_DIM;

/// Side of the square grid of radial basis functions over the workspace.
pub const RBF_GRID: usize = 5;
const RBF_WIDTH: f64 = 0.35;
/// Observation entries passed through: position, gripper width and the
/// local view. Velocity and joint readings are left out so that executing
/// a chunk faster than it was demonstrated does not shift the inputs.
const PASSED: [usize; 6] = [0, 1, 6, 7, 8, 9];

/// Fixed observation featurizer standing in for a vision backbone.
///
/// Features are part of the raw observation followed by a position RBF
/// code and that code multiplied by gripper width, so a linear read-out can
/// express position-dependent behaviour for each gripper state.
#[derive(Clone, Debug)]
pub struct Encoder {
    n_tasks: usize,
    centers: Vec<[f64; 2]>,
}

impl Encoder {
    pub fn new(n_tasks: usize) -> Self {
        let step = 2.0 / (RBF_GRID - 1) as f64;
        let centers = (0..RBF_GRID * RBF_GRID)
            .map(|k| [-1.0 + step * (k % RBF_GRID) as f64, -1.0 + step * (k / RBF_GRID) as f64])
            .collect();
        Self { n_tasks, centers }
    }

    pub fn feature_len(&self) -> usize {
        PASSED.len() + 2 * self.centers.len()
    }

    pub fn stage_feature_len(&self) -> usize {
        self.n_tasks * self.feature_len()
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn features(&self, obs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(obs.len(), OBS_DIM);
        let p = [obs[0], obs[1]];
        let rbf: Vec<f64> = self
            .centers
            .iter()
            .map(|c| (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / (2.0 * RBF_WIDTH * RBF_WIDTH)).exp())
            .collect();
        let mut out = Vec::with_capacity(self.feature_len());
        out.extend(PASSED.iter().map(|&i| obs[i]));
        out.extend_from_slice(&rbf);
        out.extend(rbf.iter().map(|r| r * obs[6]));
        out
    }

    pub fn observation_features(&self, obs: &Observation) -> Vec<f64> {
        self.features(&obs.values)
    }

    /// Features placed in the block of `task`, zeros elsewhere, so a shared
    /// linear head acts as one classifier per task.
    pub fn stage_features(&self, task: usize, features: &[f64]) -> Vec<f64> {
        let n = self.feature_len();
        let mut out = vec![0.0; self.stage_feature_len()];
        out[task * n..(task + 1) * n].copy_from_slice(features);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_widths() {
        let e = Encoder::new(4);
        let f = e.features(&[0.1; OBS_DIM]);
        assert_eq!(f.len(), e.feature_len());
        assert_eq!(f.len(), 56);
        let s = e.stage_features(2, &f);
        assert_eq!(s.len(), 224);
        assert_eq!(&s[112..168], &f[..]);
        assert!(s[..112].iter().all(|&x| x == 0.0));
    }
}
