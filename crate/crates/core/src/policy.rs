//! Policy assembly on top of the world: dataset statistics, training
//! examples, joint training of the velocity network and stage head, and
//! persistence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::action::{to_delta, ActionChunk, ActionLayout, NormalizationStats};
use crate::checkpoint::Checkpoint;
use crate::correlation::{estimate_covariance, CorrelationModel};
use crate::dataset::{Episode, EpisodeDataset};
use crate::error::{Error, Result};
use crate::flow::train::{train_with, Example, TrainConfig};
use crate::flow::{MlpShape, ParametricModel};
use crate::inference::GripperStats;
use crate::linalg::Matrix;
use crate::rng::stream;
use crate::stage::{
    head_accuracy, train_stage_head, FusionConfig, HeadTrainConfig, StageFusion, StageHead, StageSample, TaskInfo,
    STAGE_LOSS_WEIGHT,
};
use crate::world::{Encoder, WorldSpec};
use crate::{Chunk, Correlation, Stats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Shrunk empirical covariance of the normalized chunks.
    Correlated,
    /// Standard normal noise.
    Identity,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlated" => Ok(Self::Correlated),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown noise kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub hidden: usize,
    pub beta: f64,
    pub noise: NoiseKind,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub head: HeadTrainConfig,
    /// Each chunk is also trained under every stage label found within this
    /// many steps of it, so a tracker that switches a little early or late
    /// still yields in-distribution contexts.
    #[serde(default)]
    pub stage_jitter: usize,
}

impl PolicyConfig {
    /// Settings sized for the planar world on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            horizon: 12,
            hidden: 128,
            beta: 0.5,
            noise: NoiseKind::Correlated,
            fusion: FusionConfig { width: 16, sincos_width: 8, learned_width: 8 },
            train: TrainConfig { steps: 16000, batch_size: 32, learning_rate: 0.05, ..TrainConfig::default() },
            head: HeadTrainConfig { weight_decay: 0.001, ..HeadTrainConfig::default() },
            stage_jitter: STAGE_SLACK,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.fusion.sincos_width + self.fusion.learned_width > self.fusion.width {
            return Err(Error::Config("fusion token width smaller than the stage code".into()));
        }
        self.train.validate()
    }
}

/// Rows `l..l+h` of an episode's actions, repeating the last row past the
/// end.
pub fn absolute_chunk(ep: &Episode, dim: usize, l: usize, h: usize) -> Chunk {
    let last = ep.len() - 1;
    let rows: Vec<Vec<f64>> =
        (0..h).map(|i| ep.action_row(dim, (l + i).min(last)).iter().map(|&v| v as f64).collect()).collect();
    ActionChunk::from_rows(&rows).expect("rows share a width")
}

/// Delta chunk starting at every timestep of every episode, in order.
pub fn delta_chunks(ds: &EpisodeDataset, layout: &ActionLayout) -> Result<Vec<Chunk>> {
    let mut out = Vec::with_capacity(ds.total_steps());
    for ep in &ds.episodes {
        for l in 0..ep.len() {
            let q: Vec<f64> = ep.joint_row(layout.dim, l).iter().map(|&v| v as f64).collect();
            out.push(to_delta(layout, &absolute_chunk(ep, layout.dim, l, layout.horizon), &q)?);
        }
    }
    Ok(out)
}

fn feature_moments(ds: &EpisodeDataset) -> (Vec<f64>, Vec<f64>) {
    let enc = Encoder::new(ds.meta.tasks.len());
    let n = enc.feature_len();
    let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
    let mut count = 0.0;
    for ep in &ds.episodes {
        for l in 0..ep.len() {
            let obs: Vec<f64> = ep.obs_row(ds.meta.obs_dim, l).iter().map(|&v| v as f64).collect();
            for (k, f) in enc.features(&obs).into_iter().enumerate() {
                sum[k] += f;
                sq[k] += f * f;
            }
            count += 1.0;
        }
    }
    let mu: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let sigma = sq.iter().zip(&mu).map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(FEATURE_SIGMA_FLOOR)).collect();
    (mu, sigma)
}

/// Steps by which a tracked stage may lead or lag the labels: roughly two
/// inference cycles.
pub const STAGE_SLACK: usize = 12;

/// Features that barely vary are scaled by at most this inverse.
const FEATURE_SIGMA_FLOOR: f64 = 1e-3;

/// Everything estimated from the demonstrations before training.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub layout: ActionLayout,
    pub stats: Stats,
    /// Uncentered covariance of the normalized delta chunks.
    pub covariance: Matrix<f64>,
    pub gripper: GripperStats,
    /// Per-feature mean and standard deviation of the encoded observations.
    pub feature_mu: Vec<f64>,
    pub feature_sigma: Vec<f64>,
    pub tasks: Vec<TaskInfo>,
    pub fingerprint: u64,
    pub chunks: usize,
}

#[derive(Serialize, Deserialize)]
struct StatsMeta {
    layout: ActionLayout,
    exempt_dims: Vec<usize>,
    gripper: GripperStats,
    tasks: Vec<TaskInfo>,
    fingerprint: u64,
    chunks: usize,
}

impl DatasetStats {
    pub fn fit(ds: &EpisodeDataset, horizon: usize) -> Result<Self> {
        ds.validate()?;
        let m = &ds.meta;
        let layout = ActionLayout::new(horizon, m.action_dim, m.velocity_dims.clone(), m.gripper_dims.clone(), m.control_rate)?;
        let chunks = delta_chunks(ds, &layout)?;
        let stats = NormalizationStats::fit(&chunks, &layout, &layout.default_exempt_dims())?;
        let normalized = chunks.iter().map(|c| stats.normalize(c)).collect::<Result<Vec<_>>>()?;
        let covariance = estimate_covariance(&normalized)?;
        let (feature_mu, feature_sigma) = feature_moments(ds);
        Ok(Self {
            layout,
            stats,
            covariance,
            gripper: GripperStats::fit_with_slack(ds, STAGE_SLACK)?,
            feature_mu,
            feature_sigma,
            tasks: m.tasks.clone(),
            fingerprint: ds.fingerprint(),
            chunks: chunks.len(),
        })
    }

    pub fn correlation(&self, beta: f64, noise: NoiseKind) -> Result<Correlation> {
        match noise {
            NoiseKind::Correlated => CorrelationModel::from_covariance(self.layout.clone(), &self.covariance, beta),
            NoiseKind::Identity => Ok(CorrelationModel::identity(self.layout.clone())),
        }
    }

    pub fn n_stages(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.n_stages).collect()
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(StatsMeta {
            layout: self.layout.clone(),
            exempt_dims: self.stats.exempt_dims.clone(),
            gripper: self.gripper.clone(),
            tasks: self.tasks.clone(),
            fingerprint: self.fingerprint,
            chunks: self.chunks,
        })
        .expect("statistics metadata serializes")
    }

    fn add_blobs(&self, ck: Checkpoint) -> Checkpoint {
        ck.with_blob("mu", self.stats.mu.as_slice().to_vec())
            .with_blob("sigma", self.stats.sigma.as_slice().to_vec())
            .with_blob("covariance", self.covariance.as_slice().to_vec())
            .with_blob("feature_mu", self.feature_mu.clone())
            .with_blob("feature_sigma", self.feature_sigma.clone())
    }

    fn from_parts(meta: serde_json::Value, ck: &Checkpoint) -> Result<Self> {
        let m: StatsMeta = serde_json::from_value(meta).map_err(|e| Error::Format(format!("statistics metadata: {e}")))?;
        let (h, d) = (m.layout.horizon, m.layout.dim);
        let n = h * d;
        let mat = |name: &str, r: usize, c: usize| -> Result<Matrix<f64>> {
            Matrix::from_vec(r, c, ck.blob_len(name, r * c)?.to_vec())
        };
        let stats = NormalizationStats { mu: mat("mu", h, d)?, sigma: mat("sigma", h, d)?, exempt_dims: m.exempt_dims };
        if stats.sigma.as_slice().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Format("normalization scale must be positive".into()));
        }
        let f = Encoder::new(m.tasks.len()).feature_len();
        Ok(Self {
            covariance: mat("covariance", n, n)?,
            layout: m.layout,
            stats,
            gripper: m.gripper,
            feature_mu: ck.blob_len("feature_mu", f)?.to_vec(),
            feature_sigma: ck.blob_len("feature_sigma", f)?.to_vec(),
            tasks: m.tasks,
            fingerprint: m.fingerprint,
            chunks: m.chunks,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.add_blobs(Checkpoint::new("stats", self.meta()))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("stats")?;
        Self::from_parts(ck.meta.clone(), ck)
    }
}

/// Losses recorded while training a policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub action_loss: Vec<f64>,
    pub stage_loss: Vec<f64>,
    pub stage_accuracy: f64,
    /// Final `L_action + λ_s L_stage`, each averaged over the last 5% of steps.
    pub total_loss: f64,
}

/// A trained (or freshly initialized) chunk policy.
#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub seed: u64,
    pub data: DatasetStats,
    pub correlation: Correlation,
    pub model: ParametricModel<f64>,
    pub head: StageHead<f64>,
    pub fusion: StageFusion<f64>,
    pub encoder: Encoder,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    config: PolicyConfig,
    seed: u64,
    shape: MlpShape,
    head_width: usize,
    stats: serde_json::Value,
}

fn tail_mean(v: &[f64]) -> f64 {
    let n = (v.len() / 20).max(1).min(v.len());
    if n == 0 {
        return 0.0;
    }
    v[v.len() - n..].iter().sum::<f64>() / n as f64
}

impl Policy {
    /// Random velocity network, zero stage head; the fusion parameters are
    /// drawn here and never trained.
    pub fn init(data: DatasetStats, config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if data.layout.horizon != config.horizon {
            return Err(Error::Config(format!(
                "statistics fitted for horizon {}, config asks for {}",
                data.layout.horizon, config.horizon
            )));
        }
        let encoder = Encoder::new(data.tasks.len());
        let fusion = StageFusion::new(config.fusion, data.n_stages(), &mut stream(seed, "fusion"))?;
        let shape = MlpShape {
            horizon: config.horizon,
            dim: data.layout.dim,
            context_dim: encoder.feature_len() + fusion.output_len(),
            hidden: config.hidden,
        };
        let model = ParametricModel::new(shape, &mut stream(seed, "model"));
        let head = StageHead::zeros(encoder.stage_feature_len());
        let correlation = data.correlation(config.beta, config.noise)?;
        Ok(Self { config, seed, data, correlation, model, head, fusion, encoder })
    }

    pub fn layout(&self) -> &ActionLayout {
        &self.data.layout
    }

    pub fn n_stages(&self, task: usize) -> Result<usize> {
        self.data.tasks.get(task).map(|t| t.n_stages).ok_or_else(|| Error::Config(format!("unknown task {task}")))
    }

    /// Encoded observation, standardized with the dataset moments.
    pub fn features(&self, obs: &[f64]) -> Vec<f64> {
        let mut f = self.encoder.features(obs);
        for ((v, m), s) in f.iter_mut().zip(&self.data.feature_mu).zip(&self.data.feature_sigma) {
            *v = (*v - m) / s;
        }
        f
    }

    /// Standardized features followed by the flattened fusion tokens.
    pub fn context(&self, task: usize, stage: usize, features: &[f64]) -> Result<Vec<f64>> {
        let tokens = self.fusion.fuse(task, stage)?;
        Ok(features.iter().chain(tokens.as_slice()).copied().collect())
    }

    /// Stage prediction from standardized features: `(logits, argmax)`.
    pub fn predict_stage(&self, task: usize, features: &[f64]) -> Result<(Vec<f64>, usize)> {
        self.head.predict(&self.encoder.stage_features(task, features), self.n_stages(task)?)
    }

    /// Normalized delta chunks with contexts built from the true stages.
    pub fn examples(&self, ds: &EpisodeDataset) -> Result<Vec<Example<f64>>> {
        let chunks = delta_chunks(ds, self.layout())?;
        let mut fused: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let mut out = Vec::with_capacity(chunks.len());
        let mut it = chunks.into_iter();
        for ep in &ds.episodes {
            for l in 0..ep.len() {
                let chunk = self.data.stats.normalize(&it.next().expect("one chunk per step"))?;
                let obs: Vec<f64> = ep.obs_row(ds.meta.obs_dim, l).iter().map(|&v| v as f64).collect();
                let features = self.features(&obs);
                let j = self.config.stage_jitter;
                let lo = ep.stages[l.saturating_sub(j)] as usize;
                let hi = ep.stages[(l + j).min(ep.len() - 1)] as usize;
                for stage in lo..=hi {
                    if !fused.contains_key(&(ep.task, stage)) {
                        fused.insert((ep.task, stage), self.fusion.fuse(ep.task, stage)?.into_vec());
                    }
                    let mut context = features.clone();
                    context.extend_from_slice(&fused[&(ep.task, stage)]);
                    out.push(Example { chunk: chunk.clone(), context });
                }
            }
        }
        Ok(out)
    }

    pub fn stage_samples(&self, ds: &EpisodeDataset) -> Result<Vec<StageSample<f64>>> {
        let mut out = Vec::with_capacity(ds.total_steps());
        for ep in &ds.episodes {
            let n = self.n_stages(ep.task)?;
            for l in 0..ep.len() {
                let obs: Vec<f64> = ep.obs_row(ds.meta.obs_dim, l).iter().map(|&v| v as f64).collect();
                let f = self.features(&obs);
                out.push(StageSample { features: self.encoder.stage_features(ep.task, &f), n_stages: n, label: ep.stages[l] as usize });
            }
        }
        Ok(out)
    }

    /// Trains both heads. The velocity network and the stage head share no
    /// parameters, so minimizing `L_action + λ_s L_stage` splits into two
    /// independent problems; they are solved one after the other.
    pub fn train<F>(data: DatasetStats, ds: &EpisodeDataset, config: PolicyConfig, seed: u64, hook: F) -> Result<(Self, TrainReport)>
    where
        F: FnMut(usize, &ParametricModel<f64>, f64) -> Result<()>,
    {
        if ds.fingerprint() != data.fingerprint {
            log::warn!("statistics were fitted on a different dataset");
        }
        let mut policy = Self::init(data, config, seed)?;
        let examples = policy.examples(ds)?;
        let cfg = policy.config.train.clone();
        let action_loss =
            train_with(&mut policy.model, &examples, &policy.correlation, &cfg, &mut stream(seed, "train"), hook)?;
        drop(examples);
        let samples = policy.stage_samples(ds)?;
        let stage_loss = train_stage_head(&mut policy.head, &samples, &policy.config.head, &mut stream(seed, "stage"))?;
        let stage_accuracy = head_accuracy(&policy.head, &samples)?;
        let total_loss = tail_mean(&action_loss) + STAGE_LOSS_WEIGHT * tail_mean(&stage_loss);
        Ok((policy, TrainReport { action_loss, stage_loss, stage_accuracy, total_loss }))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = PolicyMeta {
            config: self.config.clone(),
            seed: self.seed,
            shape: self.model.shape(),
            head_width: self.head.width(),
            stats: self.data.meta(),
        };
        self.data
            .add_blobs(Checkpoint::new("policy", serde_json::to_value(meta).expect("policy metadata serializes")))
            .with_blob("model", self.model.params().to_vec())
            .with_blob("head_weight", self.head.weight.as_slice().to_vec())
            .with_blob("head_bias", self.head.bias.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("policy")?;
        let meta: PolicyMeta = ck.meta_as()?;
        let data = DatasetStats::from_parts(meta.stats, ck)?;
        let mut policy = Self::init(data, meta.config, meta.seed)?;
        if policy.model.shape() != meta.shape || policy.head.width() != meta.head_width {
            return Err(Error::Format("checkpoint shapes disagree with its configuration".into()));
        }
        let n = policy.model.param_count();
        policy.model = ParametricModel::from_params(meta.shape, ck.blob_len("model", n)?.to_vec())?;
        let w = policy.head.width();
        policy.head.weight = Matrix::from_vec(crate::stage::MAX_STAGES, w, ck.blob_len("head_weight", crate::stage::MAX_STAGES * w)?.to_vec())?;
        policy.head.bias = ck.blob_len("head_bias", crate::stage::MAX_STAGES)?.to_vec();
        Ok(policy)
    }

    /// The untrained policy must match the world it will run in.
    pub fn check_world(&self, spec: &WorldSpec) -> Result<()> {
        let n: Vec<usize> = spec.tasks.iter().map(|t| t.n_stages).collect();
        if n != self.data.n_stages() {
            return Err(Error::Config("policy task table does not match the world".into()));
        }
        Ok(())
    }
}

/// Headline numbers of a training run.
pub fn report_summary(r: &TrainReport) -> serde_json::Value {
    json!({
        "final_action_loss": tail_mean(&r.action_loss),
        "final_stage_loss": tail_mean(&r.stage_loss),
        "stage_accuracy": r.stage_accuracy,
        "total_loss": r.total_loss,
    })
}
