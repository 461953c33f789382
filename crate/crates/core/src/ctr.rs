//! Click prediction harness.
//!
//! Deliberately small backbone: id embeddings for the user, the target item
//! and a mean-pooled recent-item window, concatenated with the fused side
//! vectors when enabled, then an MLP to one logit. The point is to measure
//! what the extracted interests add, not to compete on backbone fidelity.
//!
//! Two trainers live here. [`train_ctr`] consumes frozen samples (side
//! vectors precomputed or absent). [`train_joint`] couples the fusion stack
//! from [`crate::fusion`] with the same head in one parameter store so the
//! attention projections learn from the click signal. [`run_ablation`]
//! builds the ladder the report file is made of.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{CrossAttentionForm, FuseCache, FusionError, FusionStack};
use crate::nn::{
    bce_grad, bce_loss, sigmoid, AdamConfig, Matrix, Mlp, MlpCache, NnError, ParamStore,
};
use crate::persist::write_atomic;
use crate::rating::{mann_whitney_auc, RatingError};

#[derive(Debug, Error)]
pub enum CtrError {
    #[error("label {value} is not binary")]
    BadLabel { value: u8 },
    #[error("config wants {which} but the sample carries none")]
    MissingSideVector { which: &'static str },
    #[error("{which} has dim {got}, expected {expected}")]
    SideDimMismatch { which: &'static str, expected: usize, got: usize },
    #[error("training data is single-class: {positives} positives, {negatives} negatives")]
    SingleClassTrain { positives: usize, negatives: usize },
    #[error(
        "test labels are single-class ({positives} pos, {negatives} neg): \
         auc is undefined; logloss was {logloss}"
    )]
    SingleClassEval { positives: usize, negatives: usize, logloss: f64 },
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error("no interest rows available for user {user_id}")]
    MissingUserRows { user_id: String },
    #[error("no knowledge vector available for item {item_id}")]
    MissingItemVector { item_id: String },
    #[error("checkpoint at {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One labeled impression. Side vectors are optional; the model config says
/// whether they must be present. `recent_item_ids` is whatever window the
/// producer kept (newest last); this module uses it as given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtrSample {
    pub user_id: String,
    pub item_id: String,
    pub recent_item_ids: Vec<String>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_user: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_item: Option<Vec<f64>>,
}

impl CtrSample {
    /// Keep only the newest `w` recent items.
    pub fn clamp_recent(&mut self, w: usize) {
        if self.recent_item_ids.len() > w {
            let cut = self.recent_item_ids.len() - w;
            self.recent_item_ids.drain(..cut);
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtrConfig {
    pub d_id: usize,
    /// Dim of e_user / e_item when the matching flag is on.
    pub side_dim: usize,
    pub use_e_user: bool,
    pub use_e_item: bool,
    pub hidden: Vec<usize>,
}

impl CtrConfig {
    pub fn input_dim(&self) -> usize {
        let mut n = 3 * self.d_id;
        if self.use_e_user {
            n += self.side_dim;
        }
        if self.use_e_item {
            n += self.side_dim;
        }
        n
    }
}

#[derive(Debug, Clone)]
pub struct CtrHyper {
    pub lr: f64,
    pub epochs: usize,
    /// 0 trains full-batch.
    pub batch: usize,
    pub seed: u64,
}

impl Default for CtrHyper {
    fn default() -> Self {
        CtrHyper { lr: 0.01, epochs: 30, batch: 64, seed: 17 }
    }
}

const EMB_USER: &str = "ctr.emb.user";
const EMB_ITEM: &str = "ctr.emb.item";
const HEAD: &str = "ctr.mlp";

/// Ids sorted, then mapped to rows 1.., with row 0 reserved for ids never
/// seen in training.
fn build_vocab(samples: &[CtrSample]) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let mut users = BTreeSet::new();
    let mut items = BTreeSet::new();
    for s in samples {
        users.insert(s.user_id.clone());
        items.insert(s.item_id.clone());
        for r in &s.recent_item_ids {
            items.insert(r.clone());
        }
    }
    let index = |set: BTreeSet<String>| {
        set.into_iter().enumerate().map(|(i, id)| (id, i + 1)).collect::<BTreeMap<_, _>>()
    };
    (index(users), index(items))
}

fn check_labels(samples: &[CtrSample]) -> Result<(usize, usize), CtrError> {
    let mut positives = 0;
    for s in samples {
        match s.label {
            1 => positives += 1,
            0 => {}
            value => return Err(CtrError::BadLabel { value }),
        }
    }
    Ok((positives, samples.len() - positives))
}

pub struct CtrModel {
    pub config: CtrConfig,
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
    pub store: ParamStore,
    mlp: Mlp,
}

impl CtrModel {
    fn new(
        config: CtrConfig,
        users: BTreeMap<String, usize>,
        items: BTreeMap<String, usize>,
        seed: u64,
    ) -> Self {
        let mut dims = vec![config.input_dim()];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        let mlp = Mlp::new(HEAD, &dims);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.insert(EMB_USER, Matrix::glorot(users.len() + 1, config.d_id, &mut rng));
        store.insert(EMB_ITEM, Matrix::glorot(items.len() + 1, config.d_id, &mut rng));
        mlp.init_params(&mut store, &mut rng);
        CtrModel { config, users, items, store, mlp }
    }

    fn user_row(&self, id: &str) -> usize {
        self.users.get(id).copied().unwrap_or(0)
    }

    fn item_row(&self, id: &str) -> usize {
        self.items.get(id).copied().unwrap_or(0)
    }

    fn side_slice<'a>(
        &self,
        which: &'static str,
        v: &'a Option<Vec<f64>>,
    ) -> Result<&'a [f64], CtrError> {
        let v = v.as_ref().ok_or(CtrError::MissingSideVector { which })?;
        if v.len() != self.config.side_dim {
            return Err(CtrError::SideDimMismatch {
                which,
                expected: self.config.side_dim,
                got: v.len(),
            });
        }
        Ok(v)
    }

    /// Concatenated input for one sample: [user emb | mean recent emb |
    /// item emb | e_user? | e_item?]. An empty recent window contributes a
    /// zero block. Side vectors outside the flags are ignored entirely.
    pub fn assemble_features(&self, sample: &CtrSample) -> Result<Vec<f64>, CtrError> {
        let d = self.config.d_id;
        let mut x = Vec::with_capacity(self.config.input_dim());
        x.extend_from_slice(self.store.get(EMB_USER).row(self.user_row(&sample.user_id)));
        let mut recent = vec![0.0; d];
        if !sample.recent_item_ids.is_empty() {
            let table = self.store.get(EMB_ITEM);
            for id in &sample.recent_item_ids {
                for (acc, v) in recent.iter_mut().zip(table.row(self.item_row(id))) {
                    *acc += v;
                }
            }
            let inv = 1.0 / sample.recent_item_ids.len() as f64;
            for v in &mut recent {
                *v *= inv;
            }
        }
        x.extend_from_slice(&recent);
        x.extend_from_slice(self.store.get(EMB_ITEM).row(self.item_row(&sample.item_id)));
        if self.config.use_e_user {
            x.extend_from_slice(self.side_slice("e_user", &sample.e_user)?);
        }
        if self.config.use_e_item {
            x.extend_from_slice(self.side_slice("e_item", &sample.e_item)?);
        }
        Ok(x)
    }

    /// Click probability, strictly inside (0, 1).
    pub fn predict(&self, sample: &CtrSample) -> Result<f64, CtrError> {
        let x = Matrix::from_rows(&[self.assemble_features(sample)?]);
        let (logits, _) = self.mlp.forward(&self.store, &x)?;
        Ok(sigmoid(logits.at(0, 0)))
    }

    pub fn save(&self, path: &Path) -> Result<(), CtrError> {
        let err =
            |msg: String| CtrError::Checkpoint { path: path.display().to_string(), msg };
        let ck = CtrCheckpoint {
            config: self.config.clone(),
            users: self.users.clone(),
            items: self.items.clone(),
            params: self.store.export_values(),
        };
        let bytes = serde_json::to_vec_pretty(&ck).map_err(|e| err(e.to_string()))?;
        write_atomic(path, &bytes).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CtrError> {
        let err =
            |msg: String| CtrError::Checkpoint { path: path.display().to_string(), msg };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let ck: CtrCheckpoint = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        let mut model = CtrModel::new(ck.config, ck.users, ck.items, 0);
        let expected: Vec<&str> = model.store.names().collect();
        let got: Vec<&str> = ck.params.keys().map(|s| s.as_str()).collect();
        if expected != got {
            return Err(err(format!("parameter names {got:?} do not match expected {expected:?}")));
        }
        model.store.import_values(&ck.params)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CtrCheckpoint {
    config: CtrConfig,
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
    params: BTreeMap<String, Matrix>,
}

/// Minibatch Adam on BCE. Deterministic in (data, hyper.seed); returns the
/// model plus the full-dataset loss before training and after each epoch.
pub fn train_ctr(
    samples: &[CtrSample],
    config: CtrConfig,
    hyper: &CtrHyper,
) -> Result<(CtrModel, Vec<f64>), CtrError> {
    let (positives, negatives) = check_labels(samples)?;
    if positives == 0 || negatives == 0 {
        return Err(CtrError::SingleClassTrain { positives, negatives });
    }
    let (users, items) = build_vocab(samples);
    let mut model = CtrModel::new(config, users, items, hyper.seed);
    let d = model.config.d_id;
    let y_all: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    // Features depend on the embedding tables, so rebuild per minibatch
    // rather than caching rows the optimizer is about to move.
    let adam = AdamConfig { lr: hyper.lr, ..AdamConfig::default() };
    let full_loss = |model: &CtrModel| -> Result<f64, CtrError> {
        let mut preds = Vec::with_capacity(samples.len());
        for s in samples {
            preds.push(model.predict(s)?);
        }
        Ok(bce_loss(&preds, &y_all)?)
    };
    let mut losses = Vec::with_capacity(hyper.epochs + 1);
    losses.push(full_loss(&model)?);
    let batch = if hyper.batch == 0 { samples.len() } else { hyper.batch };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xd1b54a32d192ed03);
    for _ in 0..hyper.epochs {
        if batch < samples.len() {
            for i in 0..order.len() {
                let j = rng.random_range(i..order.len());
                order.swap(i, j);
            }
        }
        for chunk in order.chunks(batch) {
            let mut rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                rows.push(model.assemble_features(&samples[i])?);
            }
            let xb = Matrix::from_rows(&rows);
            let yb: Vec<f64> = chunk.iter().map(|&i| y_all[i]).collect();
            let (logits, cache) = model.mlp.forward(&model.store, &xb)?;
            let probs: Vec<f64> = logits.data.iter().map(|&z| sigmoid(z)).collect();
            let dprobs = bce_grad(&probs, &yb);
            let dlogits = Matrix::from_vec(
                chunk.len(),
                1,
                probs.iter().zip(&dprobs).map(|(p, dp)| dp * p * (1.0 - p)).collect(),
            );
            model.store.zero_grads();
            let dx = model.mlp.backward(&mut model.store, &cache, &dlogits)?;
            // Route input gradients back into the embedding rows each
            // sample touched. Side-vector slices are frozen inputs.
            for (b, &i) in chunk.iter().enumerate() {
                let s = &samples[i];
                let g = dx.row(b);
                let u_row = model.user_row(&s.user_id);
                let i_row = model.item_row(&s.item_id);
                let recent_rows: Vec<usize> =
                    s.recent_item_ids.iter().map(|id| model.item_row(id)).collect();
                {
                    let table = model.store.grad_mut(EMB_USER);
                    for (acc, v) in table.row_mut(u_row).iter_mut().zip(&g[..d]) {
                        *acc += v;
                    }
                }
                let table = model.store.grad_mut(EMB_ITEM);
                if !recent_rows.is_empty() {
                    let inv = 1.0 / recent_rows.len() as f64;
                    for &r in &recent_rows {
                        for (acc, v) in table.row_mut(r).iter_mut().zip(&g[d..2 * d]) {
                            *acc += v * inv;
                        }
                    }
                }
                for (acc, v) in table.row_mut(i_row).iter_mut().zip(&g[2 * d..3 * d]) {
                    *acc += v;
                }
            }
            model.store.optimizer_step(&adam)?;
        }
        losses.push(full_loss(&model)?);
    }
    Ok((model, losses))
}

/// AUC (shared Mann-Whitney routine) plus mean BCE on held-out samples.
/// Single-class labels make AUC undefined; the error still carries the
/// logloss, which needs no class balance.
pub fn evaluate(model: &CtrModel, samples: &[CtrSample]) -> Result<Metrics, CtrError> {
    if samples.is_empty() {
        return Err(CtrError::EmptyEval);
    }
    let (positives, negatives) = check_labels(samples)?;
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(model.predict(s)?);
    }
    let targets: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    let logloss = bce_loss(&preds, &targets)?;
    if positives == 0 || negatives == 0 {
        return Err(CtrError::SingleClassEval { positives, negatives, logloss });
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.label == 1).collect();
    let auc = mann_whitney_auc(&preds, &labels)?;
    Ok(Metrics { auc, logloss, n: samples.len() })
}

// ---------------------------------------------------------------------------
// Joint fusion + head training.

/// How e_user is produced inside the joint model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserFusion {
    /// Causal self-attention + item-conditioned pooling over the prepared
    /// interest rows (the full temporal treatment when rows are score-
    /// weighted and position-coded; plain attention when they are raw).
    TemporalStack(CrossAttentionForm),
    /// Mean-pool the rows, then one trainable affine map. The flattest
    /// fusion baseline that still trains.
    MeanMlp,
}

enum FusionArm {
    Stack(FusionStack),
    Mean(Mlp),
}

enum ArmCache {
    Stack(FuseCache),
    Mean { cache: MlpCache },
}

pub struct JointCache {
    arm: ArmCache,
    // Head input; read by the kink-margin guard in gradient tests.
    #[cfg_attr(not(test), allow(dead_code))]
    x: Matrix,
    head: MlpCache,
    sample_index: usize,
}

/// Fusion stack and click head sharing one parameter store, so one Adam
/// step moves both. Interest rows and item knowledge vectors stay frozen.
pub struct JointModel {
    pub d_id: usize,
    pub side_dim: usize,
    fusion: UserFusion,
    hidden: Vec<usize>,
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
    pub store: ParamStore,
    head: Mlp,
    arm: FusionArm,
}

impl JointModel {
    pub fn new(
        fusion: UserFusion,
        d_id: usize,
        side_dim: usize,
        hidden: &[usize],
        users: BTreeMap<String, usize>,
        items: BTreeMap<String, usize>,
        seed: u64,
    ) -> Self {
        let input_dim = 3 * d_id + 2 * side_dim;
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let head = Mlp::new(HEAD, &dims);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.insert(EMB_USER, Matrix::glorot(users.len() + 1, d_id, &mut rng));
        store.insert(EMB_ITEM, Matrix::glorot(items.len() + 1, d_id, &mut rng));
        head.init_params(&mut store, &mut rng);
        let arm = match fusion {
            UserFusion::TemporalStack(form) => {
                let stack = FusionStack::new(side_dim, form);
                stack.init_params(&mut store, &mut rng);
                FusionArm::Stack(stack)
            }
            UserFusion::MeanMlp => {
                let mlp = Mlp::new("fusion.mean", &[side_dim, side_dim]);
                mlp.init_params(&mut store, &mut rng);
                FusionArm::Mean(mlp)
            }
        };
        JointModel { d_id, side_dim, fusion, hidden: hidden.to_vec(), users, items, store, head, arm }
    }

    /// The fused user vector for frozen inputs, outside training.
    pub fn fused_vector(&self, rows: &Matrix, e_item: &[f64]) -> Result<Vec<f64>, CtrError> {
        if e_item.len() != self.side_dim {
            return Err(CtrError::SideDimMismatch {
                which: "e_item",
                expected: self.side_dim,
                got: e_item.len(),
            });
        }
        let (e_user, _) = self.e_user(rows, e_item)?;
        Ok(e_user)
    }

    pub fn save(&self, path: &Path) -> Result<(), CtrError> {
        let err =
            |msg: String| CtrError::Checkpoint { path: path.display().to_string(), msg };
        let ck = JointCheckpoint {
            fusion: self.fusion,
            d_id: self.d_id,
            side_dim: self.side_dim,
            hidden: self.hidden.clone(),
            users: self.users.clone(),
            items: self.items.clone(),
            params: self.store.export_values(),
        };
        let bytes = serde_json::to_vec_pretty(&ck).map_err(|e| err(e.to_string()))?;
        write_atomic(path, &bytes).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CtrError> {
        let err =
            |msg: String| CtrError::Checkpoint { path: path.display().to_string(), msg };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let ck: JointCheckpoint =
            serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        let mut model = JointModel::new(
            ck.fusion,
            ck.d_id,
            ck.side_dim,
            &ck.hidden,
            ck.users,
            ck.items,
            0,
        );
        let expected: Vec<&str> = model.store.names().collect();
        let got: Vec<&str> = ck.params.keys().map(|s| s.as_str()).collect();
        if expected != got {
            return Err(err(format!("parameter names {got:?} do not match expected {expected:?}")));
        }
        model.store.import_values(&ck.params)?;
        Ok(model)
    }

    fn user_row(&self, id: &str) -> usize {
        self.users.get(id).copied().unwrap_or(0)
    }

    fn item_row(&self, id: &str) -> usize {
        self.items.get(id).copied().unwrap_or(0)
    }

    fn e_user(&self, rows: &Matrix, e_item: &[f64]) -> Result<(Vec<f64>, ArmCache), CtrError> {
        match &self.arm {
            FusionArm::Stack(stack) => {
                let (e_user, cache) = stack.forward(&self.store, rows, e_item)?;
                Ok((e_user, ArmCache::Stack(cache)))
            }
            FusionArm::Mean(mlp) => {
                if rows.rows == 0 {
                    return Err(CtrError::Fusion(FusionError::NoInterests));
                }
                let mut mean = vec![0.0; rows.cols];
                for j in 0..rows.rows {
                    for (acc, v) in mean.iter_mut().zip(rows.row(j)) {
                        *acc += v;
                    }
                }
                let inv = 1.0 / rows.rows as f64;
                for v in &mut mean {
                    *v *= inv;
                }
                let x = Matrix::from_rows(&[mean]);
                let (y, cache) = mlp.forward(&self.store, &x)?;
                Ok((y.row(0).to_vec(), ArmCache::Mean { cache }))
            }
        }
    }

    pub fn forward_sample(
        &self,
        sample: &CtrSample,
        sample_index: usize,
        rows: &Matrix,
        e_item: &[f64],
    ) -> Result<(f64, JointCache), CtrError> {
        if e_item.len() != self.side_dim {
            return Err(CtrError::SideDimMismatch {
                which: "e_item",
                expected: self.side_dim,
                got: e_item.len(),
            });
        }
        let (e_user, arm) = self.e_user(rows, e_item)?;
        let d = self.d_id;
        let mut feat = Vec::with_capacity(3 * d + 2 * self.side_dim);
        feat.extend_from_slice(self.store.get(EMB_USER).row(self.user_row(&sample.user_id)));
        let mut recent = vec![0.0; d];
        if !sample.recent_item_ids.is_empty() {
            let table = self.store.get(EMB_ITEM);
            for id in &sample.recent_item_ids {
                for (acc, v) in recent.iter_mut().zip(table.row(self.item_row(id))) {
                    *acc += v;
                }
            }
            let inv = 1.0 / sample.recent_item_ids.len() as f64;
            for v in &mut recent {
                *v *= inv;
            }
        }
        feat.extend_from_slice(&recent);
        feat.extend_from_slice(self.store.get(EMB_ITEM).row(self.item_row(&sample.item_id)));
        feat.extend_from_slice(&e_user);
        feat.extend_from_slice(e_item);
        let x = Matrix::from_rows(&[feat]);
        let (logits, head) = self.head.forward(&self.store, &x)?;
        let p = sigmoid(logits.at(0, 0));
        Ok((p, JointCache { arm, x, head, sample_index }))
    }

    /// Accumulates gradients for one sample given dL/dlogit.
    pub fn backward_sample(
        &mut self,
        sample: &CtrSample,
        cache: &JointCache,
        dlogit: f64,
    ) -> Result<(), CtrError> {
        let dz = Matrix::from_vec(1, 1, vec![dlogit]);
        let dx = self.head.backward(&mut self.store, &cache.head, &dz)?;
        let g = dx.row(0).to_vec();
        let d = self.d_id;
        let u_row = self.user_row(&sample.user_id);
        let i_row = self.item_row(&sample.item_id);
        let recent_rows: Vec<usize> =
            sample.recent_item_ids.iter().map(|id| self.item_row(id)).collect();
        {
            let table = self.store.grad_mut(EMB_USER);
            for (acc, v) in table.row_mut(u_row).iter_mut().zip(&g[..d]) {
                *acc += v;
            }
        }
        {
            let table = self.store.grad_mut(EMB_ITEM);
            if !recent_rows.is_empty() {
                let inv = 1.0 / recent_rows.len() as f64;
                for &r in &recent_rows {
                    for (acc, v) in table.row_mut(r).iter_mut().zip(&g[d..2 * d]) {
                        *acc += v * inv;
                    }
                }
            }
            for (acc, v) in table.row_mut(i_row).iter_mut().zip(&g[2 * d..3 * d]) {
                *acc += v;
            }
        }
        let d_e_user = &g[3 * d..3 * d + self.side_dim];
        match (&self.arm, &cache.arm) {
            (FusionArm::Stack(stack), ArmCache::Stack(fc)) => {
                // dr and d_e_item fall on frozen inputs.
                stack.backward(&mut self.store, fc, d_e_user)?;
            }
            (FusionArm::Mean(mlp), ArmCache::Mean { cache, .. }) => {
                let dy = Matrix::from_rows(&[d_e_user.to_vec()]);
                mlp.backward(&mut self.store, cache, &dy)?;
            }
            _ => unreachable!("cache built by a different fusion arm"),
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct JointCheckpoint {
    fusion: UserFusion,
    d_id: usize,
    side_dim: usize,
    hidden: Vec<usize>,
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
    params: BTreeMap<String, Matrix>,
}

/// Per-user prepared interest rows plus per-item knowledge vectors, the
/// frozen inputs joint training reads.
pub struct JointInputs<'a> {
    pub user_rows: &'a BTreeMap<String, Matrix>,
    pub item_vecs: &'a BTreeMap<String, Vec<f64>>,
}

impl JointInputs<'_> {
    fn rows_for(&self, user_id: &str) -> Result<&Matrix, CtrError> {
        self.user_rows
            .get(user_id)
            .ok_or_else(|| CtrError::MissingUserRows { user_id: user_id.to_string() })
    }

    fn vec_for(&self, item_id: &str) -> Result<&Vec<f64>, CtrError> {
        self.item_vecs
            .get(item_id)
            .ok_or_else(|| CtrError::MissingItemVector { item_id: item_id.to_string() })
    }
}

/// Joint minibatch Adam over fusion + head. Same loss bookkeeping as
/// [`train_ctr`]; samples run one at a time because sequence lengths vary.
pub fn train_joint(
    samples: &[CtrSample],
    inputs: &JointInputs,
    fusion: UserFusion,
    d_id: usize,
    side_dim: usize,
    hidden: &[usize],
    hyper: &CtrHyper,
) -> Result<(JointModel, Vec<f64>), CtrError> {
    let (positives, negatives) = check_labels(samples)?;
    if positives == 0 || negatives == 0 {
        return Err(CtrError::SingleClassTrain { positives, negatives });
    }
    for s in samples {
        inputs.rows_for(&s.user_id)?;
        inputs.vec_for(&s.item_id)?;
    }
    let (users, items) = build_vocab(samples);
    let mut model = JointModel::new(fusion, d_id, side_dim, hidden, users, items, hyper.seed);
    let y_all: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    let adam = AdamConfig { lr: hyper.lr, ..AdamConfig::default() };
    let full_loss = |model: &JointModel| -> Result<f64, CtrError> {
        let mut preds = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let (p, _) =
                model.forward_sample(s, i, inputs.rows_for(&s.user_id)?, inputs.vec_for(&s.item_id)?)?;
            preds.push(p);
        }
        Ok(bce_loss(&preds, &y_all)?)
    };
    let mut losses = Vec::with_capacity(hyper.epochs + 1);
    losses.push(full_loss(&model)?);
    let batch = if hyper.batch == 0 { samples.len() } else { hyper.batch };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xd1b54a32d192ed03);
    for _ in 0..hyper.epochs {
        if batch < samples.len() {
            for i in 0..order.len() {
                let j = rng.random_range(i..order.len());
                order.swap(i, j);
            }
        }
        for chunk in order.chunks(batch) {
            let mut probs = Vec::with_capacity(chunk.len());
            let mut caches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let (p, cache) = model.forward_sample(
                    s,
                    i,
                    inputs.rows_for(&s.user_id)?,
                    inputs.vec_for(&s.item_id)?,
                )?;
                probs.push(p);
                caches.push(cache);
            }
            let yb: Vec<f64> = chunk.iter().map(|&i| y_all[i]).collect();
            let dprobs = bce_grad(&probs, &yb);
            model.store.zero_grads();
            for (cache, (p, dp)) in caches.iter().zip(probs.iter().zip(&dprobs)) {
                let dlogit = dp * p * (1.0 - p);
                model.backward_sample(&samples[cache.sample_index], cache, dlogit)?;
            }
            model.store.optimizer_step(&adam)?;
        }
        losses.push(full_loss(&model)?);
    }
    Ok((model, losses))
}

pub fn evaluate_joint(
    model: &JointModel,
    samples: &[CtrSample],
    inputs: &JointInputs,
) -> Result<Metrics, CtrError> {
    if samples.is_empty() {
        return Err(CtrError::EmptyEval);
    }
    let (positives, negatives) = check_labels(samples)?;
    let mut preds = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (p, _) =
            model.forward_sample(s, i, inputs.rows_for(&s.user_id)?, inputs.vec_for(&s.item_id)?)?;
        preds.push(p);
    }
    let targets: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    let logloss = bce_loss(&preds, &targets)?;
    if positives == 0 || negatives == 0 {
        return Err(CtrError::SingleClassEval { positives, negatives, logloss });
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.label == 1).collect();
    let auc = mann_whitney_auc(&preds, &labels)?;
    Ok(Metrics { auc, logloss, n: samples.len() })
}

// ---------------------------------------------------------------------------
// Ablation ladder.

/// One report row: either measured metrics or an explicit skip with the
/// reason the rung could not run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AblationEntry {
    Metrics { name: String, auc: f64, logloss: f64, seed: u64 },
    Skipped { name: String, skipped: bool, reason: String },
}

impl AblationEntry {
    pub fn name(&self) -> &str {
        match self {
            AblationEntry::Metrics { name, .. } | AblationEntry::Skipped { name, .. } => name,
        }
    }

    pub fn auc(&self) -> Option<f64> {
        match self {
            AblationEntry::Metrics { auc, .. } => Some(*auc),
            AblationEntry::Skipped { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationEntry>,
}

/// Everything the ladder can consume. A rung whose inputs are absent shows
/// up as a skip entry instead of failing the whole run.
pub struct AblationInputs<'a> {
    pub train: &'a [CtrSample],
    pub test: &'a [CtrSample],
    /// Mean-pooled interest embedding per user (the averaging rung).
    pub cube_user_vecs: Option<&'a BTreeMap<String, Vec<f64>>>,
    /// Interest rows with uniform scores, no search (the fusion rung).
    pub tif_user_rows: Option<&'a BTreeMap<String, Matrix>>,
    /// Interest rows from searched paths with their selection scores.
    pub hts_user_rows: Option<&'a BTreeMap<String, Matrix>>,
    /// Raw searched-interest embeddings, no score weighting or position
    /// codes; only the optional fusion-variant rows read these.
    pub hts_raw_rows: Option<&'a BTreeMap<String, Matrix>>,
    pub item_vecs: Option<&'a BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub d_id: usize,
    pub side_dim: usize,
    pub hidden: Vec<usize>,
    pub hyper: CtrHyper,
    pub seed: u64,
    pub cross_form: CrossAttentionForm,
    /// Adds the fusion-mechanism comparison rows (mean+MLP, plain
    /// attention, temporal) on top of the four ladder rows.
    pub fusion_variants: bool,
}

fn attach_user_vecs(
    samples: &[CtrSample],
    vecs: &BTreeMap<String, Vec<f64>>,
    dim: usize,
) -> Vec<CtrSample> {
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            // A user the artifact never covered still gets a defined input.
            s.e_user = Some(vecs.get(&s.user_id).cloned().unwrap_or_else(|| vec![0.0; dim]));
            s.e_item = None;
            s
        })
        .collect()
}

fn metrics_entry(name: &str, seed: u64, result: Result<Metrics, CtrError>) -> AblationEntry {
    match result {
        Ok(m) => AblationEntry::Metrics { name: name.to_string(), auc: m.auc, logloss: m.logloss, seed },
        Err(e) => {
            AblationEntry::Skipped { name: name.to_string(), skipped: true, reason: e.to_string() }
        }
    }
}

fn skip_entry(name: &str, reason: &str) -> AblationEntry {
    AblationEntry::Skipped { name: name.to_string(), skipped: true, reason: reason.to_string() }
}

fn joint_rung(
    name: &str,
    seed: u64,
    rows: &BTreeMap<String, Matrix>,
    item_vecs: &BTreeMap<String, Vec<f64>>,
    fusion: UserFusion,
    inputs: &AblationInputs,
    opts: &AblationOptions,
) -> AblationEntry {
    let joint = JointInputs { user_rows: rows, item_vecs };
    let hyper = CtrHyper { seed, ..opts.hyper.clone() };
    let run = || -> Result<Metrics, CtrError> {
        let (model, _) = train_joint(
            inputs.train,
            &joint,
            fusion,
            opts.d_id,
            opts.side_dim,
            &opts.hidden,
            &hyper,
        )?;
        evaluate_joint(&model, inputs.test, &joint)
    };
    metrics_entry(name, seed, run())
}

/// Trains and scores every rung with shared hyperparameters; only the side
/// information differs between rows, and each row gets its own fixed seed.
pub fn run_ablation(inputs: &AblationInputs, opts: &AblationOptions) -> AblationReport {
    let mut rows = Vec::new();
    let mut row_seed = {
        let mut next = opts.seed;
        move || {
            let s = next;
            next += 1;
            s
        }
    };

    let base_cfg = CtrConfig {
        d_id: opts.d_id,
        side_dim: opts.side_dim,
        use_e_user: false,
        use_e_item: false,
        hidden: opts.hidden.clone(),
    };
    {
        let seed = row_seed();
        let hyper = CtrHyper { seed, ..opts.hyper.clone() };
        let run = || -> Result<Metrics, CtrError> {
            let (model, _) = train_ctr(inputs.train, base_cfg.clone(), &hyper)?;
            evaluate(&model, inputs.test)
        };
        rows.push(metrics_entry("base", seed, run()));
    }

    {
        let seed = row_seed();
        match inputs.cube_user_vecs {
            Some(vecs) => {
                let cfg = CtrConfig { use_e_user: true, ..base_cfg.clone() };
                let hyper = CtrHyper { seed, ..opts.hyper.clone() };
                let train = attach_user_vecs(inputs.train, vecs, opts.side_dim);
                let test = attach_user_vecs(inputs.test, vecs, opts.side_dim);
                let run = || -> Result<Metrics, CtrError> {
                    let (model, _) = train_ctr(&train, cfg, &hyper)?;
                    evaluate(&model, &test)
                };
                rows.push(metrics_entry("+CUBE", seed, run()));
            }
            None => rows.push(skip_entry(
                "+CUBE",
                "mean-pooled interest vectors missing; run the cascade stage first",
            )),
        }
    }

    {
        let seed = row_seed();
        match (inputs.tif_user_rows, inputs.item_vecs) {
            (Some(rows_map), Some(items)) => rows.push(joint_rung(
                "+CUBE+TIF",
                seed,
                rows_map,
                items,
                UserFusion::TemporalStack(opts.cross_form),
                inputs,
                opts,
            )),
            _ => rows.push(skip_entry(
                "+CUBE+TIF",
                "interest rows or item knowledge vectors missing; run the fuse stage first",
            )),
        }
    }

    {
        let seed = row_seed();
        match (inputs.hts_user_rows, inputs.item_vecs) {
            (Some(rows_map), Some(items)) => rows.push(joint_rung(
                "+CUBE+TIF+HTS",
                seed,
                rows_map,
                items,
                UserFusion::TemporalStack(opts.cross_form),
                inputs,
                opts,
            )),
            _ => rows.push(skip_entry(
                "+CUBE+TIF+HTS",
                "searched interest rows missing; run the search and fuse stages first",
            )),
        }
    }

    if opts.fusion_variants {
        for (name, rows_src, fusion) in [
            ("fusion-MLP", inputs.hts_raw_rows, UserFusion::MeanMlp),
            ("fusion-SA", inputs.hts_raw_rows, UserFusion::TemporalStack(opts.cross_form)),
            ("fusion-TIF", inputs.hts_user_rows, UserFusion::TemporalStack(opts.cross_form)),
        ] {
            let seed = row_seed();
            match (rows_src, inputs.item_vecs) {
                (Some(rows_map), Some(items)) => {
                    rows.push(joint_rung(name, seed, rows_map, items, fusion, inputs, opts));
                }
                _ => rows.push(skip_entry(
                    name,
                    "variant rows need searched interests and item vectors; \
                     run the search and fuse stages first",
                )),
            }
        }
    }

    AblationReport { rows }
}
