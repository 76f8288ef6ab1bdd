//! Attention-mask construction for the grouped prefix/suffix token layout
//! and layer-mixing of key/value caches.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Image,
    Task,
    Stage,
    State,
    Fast,
    Action,
}

impl Group {
    pub const ALL: [Group; 6] = [Group::Image, Group::Task, Group::Stage, Group::State, Group::Fast, Group::Action];

    /// Whether a query token of group `self` may attend to a key of group
    /// `key`. Within the fast group causality is applied separately.
    pub fn attends(self, key: Group) -> bool {
        use Group::*;
        match self {
            Image | Task => matches!(key, Image | Task),
            Stage => matches!(key, Image | Task | State),
            State => matches!(key, Image | Task | Stage | State),
            Fast => true,
            Action => key != Fast,
        }
    }
}

/// Token counts per group, laid out in [`Group::ALL`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGroups {
    pub image: usize,
    pub task: usize,
    pub stage: usize,
    pub state: usize,
    pub fast: usize,
    pub action: usize,
}

impl TokenGroups {
    pub fn count(&self, g: Group) -> usize {
        match g {
            Group::Image => self.image,
            Group::Task => self.task,
            Group::Stage => self.stage,
            Group::State => self.state,
            Group::Fast => self.fast,
            Group::Action => self.action,
        }
    }

    pub fn total(&self) -> usize {
        Group::ALL.iter().map(|&g| self.count(g)).sum()
    }

    /// Group of every token position.
    pub fn labels(&self) -> Vec<Group> {
        Group::ALL.iter().flat_map(|&g| std::iter::repeat_n(g, self.count(g))).collect()
    }
}

/// Square boolean mask; `get(q, k)` is true when query `q` may attend to key `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    /// Plain-text portable bitmap (`P1`), one row per query; `1` marks an
    /// allowed entry.
    pub fn to_pbm(&self) -> String {
        let mut s = format!("P1\n{} {}\n", self.n, self.n);
        for q in 0..self.n {
            let row: Vec<&str> = (0..self.n).map(|k| if self.get(q, k) { "1" } else { "0" }).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

pub fn build_mask(groups: &TokenGroups) -> AttentionMask {
    let labels = groups.labels();
    let n = labels.len();
    let mut allowed = vec![false; n * n];
    for (q, &gq) in labels.iter().enumerate() {
        for (k, &gk) in labels.iter().enumerate() {
            allowed[q * n + k] = if gq == Group::Fast && gk == Group::Fast { k <= q } else { gq.attends(gk) };
        }
    }
    AttentionMask { n, allowed }
}

/// Key or value cache of one layer, shape `(batch, seq, heads, head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvTensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> KvTensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Layout(format!("{} values for cache shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![T::zero(); shape.iter().product()] }
    }
}

/// Per-expert-layer linear combination of encoder-layer caches.
///
/// `w_k[(i, j)]` weights encoder layer `i` in expert layer `j`; biases are
/// one `heads × head_dim` tensor per expert layer, broadcast over batch and
/// sequence. Keys and values have separate coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct KvMixer<T> {
    pub heads: usize,
    pub head_dim: usize,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub b_k: Vec<Vec<T>>,
    pub b_v: Vec<Vec<T>>,
}

impl<T: Real> KvMixer<T> {
    /// Layer-to-layer identity (`w_ij = δ_ij`, zero bias).
    pub fn identity(l_vlm: usize, l_expert: usize, heads: usize, head_dim: usize) -> Self {
        let w = Matrix::from_fn(l_vlm, l_expert, |i, j| if i == j { T::one() } else { T::zero() });
        let b = vec![vec![T::zero(); heads * head_dim]; l_expert];
        Self { heads, head_dim, w_k: w.clone(), w_v: w, b_k: b.clone(), b_v: b }
    }

    pub fn l_vlm(&self) -> usize {
        self.w_k.rows()
    }

    pub fn l_expert(&self) -> usize {
        self.w_k.cols()
    }

    /// Trainable scalars for one expert layer, keys and values together.
    pub fn params_per_expert_layer(&self) -> usize {
        2 * (self.l_vlm() + self.heads * self.head_dim)
    }

    fn mix_one(&self, caches: &[KvTensor<T>], w: &Matrix<T>, b: &[Vec<T>]) -> Result<Vec<KvTensor<T>>> {
        let shape = caches[0].shape;
        let hd = self.heads * self.head_dim;
        (0..self.l_expert())
            .map(|j| {
                let mut out: Option<Vec<T>> = None;
                for (i, c) in caches.iter().enumerate() {
                    let wij = w[(i, j)];
                    if wij == T::zero() {
                        continue;
                    }
                    match out.as_mut() {
                        None => out = Some(c.data.iter().map(|&x| wij * x).collect()),
                        Some(acc) => {
                            for (a, &x) in acc.iter_mut().zip(&c.data) {
                                *a += wij * x;
                            }
                        }
                    }
                }
                let mut data = out.unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
                for (p, v) in data.iter_mut().enumerate() {
                    let bias = b[j][p % hd];
                    if bias != T::zero() {
                        *v += bias;
                    }
                }
                KvTensor::new(shape, data)
            })
            .collect()
    }

    /// Mixes per-layer key and value caches into one cache per expert layer.
    pub fn mix_kv(&self, keys: &[KvTensor<T>], values: &[KvTensor<T>]) -> Result<(Vec<KvTensor<T>>, Vec<KvTensor<T>>)> {
        if keys.len() != self.l_vlm() || values.len() != self.l_vlm() {
            return Err(Error::Layout(format!(
                "mixer expects {} encoder layers, got {} keys and {} values",
                self.l_vlm(),
                keys.len(),
                values.len()
            )));
        }
        let shape = keys[0].shape;
        if shape[2] != self.heads || shape[3] != self.head_dim {
            return Err(Error::Layout(format!("cache shape {shape:?} does not match mixer heads")));
        }
        if keys.iter().chain(values).any(|c| c.shape != shape) {
            return Err(Error::Layout("caches have non-uniform shapes".into()));
        }
        Ok((self.mix_one(keys, &self.w_k, &self.b_k)?, self.mix_one(values, &self.w_v, &self.b_v)?))
    }
}
