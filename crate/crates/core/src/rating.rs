//! Interest rating: AUC-comparison labels and the two binary raters.
//!
//! Extracting one interest per chunk is a multi-step generation, and these
//! raters grade the steps. An interest is *continuous* when it predicts the
//! successor chunk's items better than the previous interests alone, and
//! *effective* when it predicts them better than the raw behaviors it
//! summarizes. Both labels come from comparing predictive AUCs on a balanced
//! evaluation set drawn from the successor chunk; the raters then learn the
//! labels from encoded interest texts, so tree search can score candidates
//! without ever touching evaluation data.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::BehaviorChunk;
use crate::behavior::Interaction;
use crate::encoder::{fnv1a, TextEncoder};
use crate::gateway::{render_prompt, Gateway, GatewayError, PromptContext, PromptKind, PromptLimits};
use crate::nn::{bce_grad, bce_loss, sigmoid, Matrix, Mlp, NnError, ParamStore};
use crate::persist::write_atomic;

#[derive(Debug, Error)]
pub enum RatingError {
    #[error("AUC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score at index {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("training needs both classes, got {positives} positives and {negatives} negatives")]
    DegenerateTraining { positives: usize, negatives: usize },
    #[error("model expects encoder dim {model}, encoder produces {encoder}")]
    EncoderDim { model: usize, encoder: usize },
    #[error("{0:?} is not a judgment prompt kind")]
    WrongVariant(PromptKind),
    #[error("checkpoint at {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Mann-Whitney AUC with averaged ranks for ties: the probability that a
/// random positive outranks a random negative, ties counting one half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> Result<f64, RatingError> {
    if scores.len() != labels.len() {
        return Err(RatingError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(RatingError::NonFiniteScore { index });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(RatingError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) share the averaged 1-based rank.
        let rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Balanced judgment set for one chunk transition, drawn from the successor
/// chunk: equally many positives and negatives, at most `n` of each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSet {
    /// Index of the chunk being rated (samples come from its successor).
    pub chunk_index: usize,
    pub samples: Vec<(Interaction, bool)>,
    pub n: usize,
}

impl EvalSet {
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|(_, l)| *l).count();
        (pos, self.samples.len() - pos)
    }
}

/// Samples min(n, #pos, #neg) of each class without replacement, seeded by
/// (seed, user, chunk). Returns None when either class is absent; that chunk
/// transition simply produces no rating example.
pub fn build_eval_set(next_chunk: &BehaviorChunk, n: usize, seed: u64) -> Option<EvalSet> {
    let pos: Vec<usize> =
        (0..next_chunk.items.len()).filter(|&i| next_chunk.items[i].label).collect();
    let neg: Vec<usize> =
        (0..next_chunk.items.len()).filter(|&i| !next_chunk.items[i].label).collect();
    let k = n.min(pos.len()).min(neg.len());
    if k == 0 {
        return None;
    }
    let mut h = fnv1a(next_chunk.user_id.as_bytes(), seed);
    h ^= (next_chunk.chunk_index as u64).wrapping_mul(0x9e3779b97f4a7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let mut chosen = sample_without_replacement(&pos, k, &mut rng);
    chosen.extend(sample_without_replacement(&neg, k, &mut rng));
    chosen.sort_unstable();
    let samples = chosen
        .into_iter()
        .map(|i| {
            let item = next_chunk.items[i].clone();
            let label = item.label;
            (item, label)
        })
        .collect();
    Some(EvalSet { chunk_index: next_chunk.chunk_index.saturating_sub(1), samples, n })
}

fn sample_without_replacement(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool = pool.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Everything a judgment prompt about one chunk transition can reference.
#[derive(Debug, Clone, Copy)]
pub struct TransitionContext<'a> {
    /// Interests before the current chunk, oldest first.
    pub prev_texts: &'a [String],
    pub current_text: &'a str,
    pub chunk: &'a BehaviorChunk,
}

/// AUC of backend yes-probabilities against the eval-set labels, with the
/// prompt built from exactly the evidence the variant is allowed to see.
pub fn variant_auc(
    gateway: &Gateway,
    variant: PromptKind,
    ctx: &TransitionContext,
    eval: &EvalSet,
    limits: &PromptLimits,
) -> Result<f64, RatingError> {
    let mut scores = Vec::with_capacity(eval.samples.len());
    let mut labels = Vec::with_capacity(eval.samples.len());
    for (item, label) in &eval.samples {
        let pctx = match variant {
            PromptKind::Seq => {
                PromptContext { prev_interests: ctx.prev_texts, item: Some(item), ..Default::default() }
            }
            PromptKind::Point => PromptContext {
                current_interest: Some(ctx.current_text),
                item: Some(item),
                ..Default::default()
            },
            PromptKind::Hist => {
                PromptContext { chunk: Some(ctx.chunk), item: Some(item), ..Default::default() }
            }
            other => return Err(RatingError::WrongVariant(other)),
        };
        let rendered = render_prompt(variant, &pctx, limits)?;
        scores.push(gateway.yes_probability(&rendered)?);
        labels.push(*label);
    }
    mann_whitney_auc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VariantAucs {
    pub seq: f64,
    pub point: f64,
    pub hist: f64,
}

pub fn transition_aucs(
    gateway: &Gateway,
    ctx: &TransitionContext,
    eval: &EvalSet,
    limits: &PromptLimits,
) -> Result<VariantAucs, RatingError> {
    Ok(VariantAucs {
        seq: variant_auc(gateway, PromptKind::Seq, ctx, eval, limits)?,
        point: variant_auc(gateway, PromptKind::Point, ctx, eval, limits)?,
        hist: variant_auc(gateway, PromptKind::Hist, ctx, eval, limits)?,
    })
}

/// The label rule. Continuity credits strict improvement over the previous
/// interests; effectiveness credits strict improvement over raw behaviors.
/// Equal AUCs carry no evidence of gain and label negative.
pub fn transition_labels(aucs: &VariantAucs) -> (bool, bool) {
    (aucs.point > aucs.seq, aucs.point > aucs.hist)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Cont,
    Eff,
}

/// One rater training record; the wire format of rating_train.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingExample {
    pub kind: ExampleKind,
    pub user_id: String,
    pub chunk_index: usize,
    /// Oldest first; empty for `eff` examples, at most K entries for `cont`.
    pub prev_texts: Vec<String>,
    pub current_text: String,
    pub label: u8,
    pub auc_seq: f64,
    pub auc_point: f64,
    pub auc_hist: f64,
}

/// One user's plain cascading pass: step i's interest was generated
/// conditioned on step i-1's interest, no search involved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeUser {
    pub user_id: String,
    pub steps: Vec<CascadeStep>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeStep {
    pub chunk: BehaviorChunk,
    pub interest_text: String,
}

/// Builds the continuity and effectiveness datasets from one cascade pass.
/// Each chunk with a usable successor eval set contributes one example to
/// each dataset. Users are independent, so they fan out across `workers`
/// threads; output order stays the input user order either way.
pub fn build_rating_datasets(
    cascade: &[CascadeUser],
    n_eval: usize,
    k_prev: usize,
    seed: u64,
    gateway: &Gateway,
    limits: &PromptLimits,
    workers: usize,
) -> Result<(Vec<RatingExample>, Vec<RatingExample>), RatingError> {
    type UserOut = Result<(Vec<RatingExample>, Vec<RatingExample>), RatingError>;
    let mut slots: Vec<Option<UserOut>> = (0..cascade.len()).map(|_| None).collect();
    if workers <= 1 {
        for (user, slot) in cascade.iter().zip(slots.iter_mut()) {
            *slot = Some(examples_for_user(user, n_eval, k_prev, seed, gateway, limits));
        }
    } else {
        let block = cascade.len().div_ceil(workers).max(1);
        std::thread::scope(|s| {
            for (users, out) in cascade.chunks(block).zip(slots.chunks_mut(block)) {
                s.spawn(move || {
                    for (user, slot) in users.iter().zip(out.iter_mut()) {
                        *slot = Some(examples_for_user(user, n_eval, k_prev, seed, gateway, limits));
                    }
                });
            }
        });
    }
    let mut cont = Vec::new();
    let mut eff = Vec::new();
    for slot in slots {
        let (c, e) = slot.expect("every user slot is filled")?;
        cont.extend(c);
        eff.extend(e);
    }
    Ok((cont, eff))
}

fn examples_for_user(
    user: &CascadeUser,
    n_eval: usize,
    k_prev: usize,
    seed: u64,
    gateway: &Gateway,
    limits: &PromptLimits,
) -> Result<(Vec<RatingExample>, Vec<RatingExample>), RatingError> {
    let mut cont = Vec::new();
    let mut eff = Vec::new();
    for t in 0..user.steps.len().saturating_sub(1) {
        let step = &user.steps[t];
        let Some(eval) = build_eval_set(&user.steps[t + 1].chunk, n_eval, seed) else {
            continue;
        };
        let mut prev_texts: Vec<String> =
            user.steps[..t].iter().rev().take(k_prev).map(|s| s.interest_text.clone()).collect();
        prev_texts.reverse();
        let ctx = TransitionContext {
            prev_texts: &prev_texts,
            current_text: &step.interest_text,
            chunk: &step.chunk,
        };
        let aucs = transition_aucs(gateway, &ctx, &eval, limits)?;
        let (cont_label, eff_label) = transition_labels(&aucs);
        let base = RatingExample {
            kind: ExampleKind::Cont,
            user_id: user.user_id.clone(),
            chunk_index: step.chunk.chunk_index,
            prev_texts: prev_texts.clone(),
            current_text: step.interest_text.clone(),
            label: cont_label as u8,
            auc_seq: aucs.seq,
            auc_point: aucs.point,
            auc_hist: aucs.hist,
        };
        eff.push(RatingExample {
            kind: ExampleKind::Eff,
            prev_texts: Vec::new(),
            label: eff_label as u8,
            ..base.clone()
        });
        cont.push(base);
    }
    Ok((cont, eff))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaterKind {
    /// Continuity rater: sees the previous interests and the current one.
    Srm,
    /// Effectiveness rater: sees the current interest alone.
    Prm,
}

impl RaterKind {
    fn prefix(self) -> &'static str {
        match self {
            RaterKind::Srm => "srm",
            RaterKind::Prm => "prm",
        }
    }
}

/// Sigmoid-headed MLP over mean-pooled text embeddings. Each text vector gets
/// one extra position channel before pooling (current = 1, the j-th most
/// recent previous = 1 - j/(K+1)), so the pooled input still distinguishes
/// the current interest from history.
pub struct RatingModel {
    pub kind: RaterKind,
    pub encoder_dim: usize,
    pub k_prev: usize,
    pub hidden: Vec<usize>,
    store: ParamStore,
    mlp: Mlp,
}

fn mlp_dims(encoder_dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![encoder_dim + 1];
    dims.extend_from_slice(hidden);
    dims.push(1);
    dims
}

impl RatingModel {
    pub fn new(kind: RaterKind, encoder_dim: usize, k_prev: usize, hidden: Vec<usize>, seed: u64) -> Self {
        let mlp = Mlp::new(kind.prefix(), &mlp_dims(encoder_dim, &hidden));
        let mut store = ParamStore::new();
        mlp.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        RatingModel { kind, encoder_dim, k_prev, hidden, store, mlp }
    }

    fn features(&self, prev_texts: &[String], current: &str, encoder: &dyn TextEncoder) -> Vec<f64> {
        let d = self.encoder_dim;
        let mut acc = vec![0.0; d + 1];
        let mut count = 0.0;
        let add = |text: &str, pos: f64, acc: &mut Vec<f64>, count: &mut f64| {
            let emb = encoder.encode(text);
            for (a, e) in acc.iter_mut().zip(&emb) {
                *a += e;
            }
            acc[d] += pos;
            *count += 1.0;
        };
        add(current, 1.0, &mut acc, &mut count);
        if self.kind == RaterKind::Srm {
            for (j, text) in prev_texts.iter().rev().take(self.k_prev).enumerate() {
                let pos = 1.0 - (j + 1) as f64 / (self.k_prev + 1) as f64;
                add(text, pos, &mut acc, &mut count);
            }
        }
        for a in acc.iter_mut() {
            *a /= count;
        }
        acc
    }

    /// Scores one candidate interest in [0, 1]. The effectiveness rater
    /// ignores `prev_texts` entirely; the continuity rater uses at most its
    /// last `k_prev` entries (given oldest first).
    pub fn score(
        &self,
        prev_texts: &[String],
        current: &str,
        encoder: &dyn TextEncoder,
    ) -> Result<f64, RatingError> {
        if encoder.dim() != self.encoder_dim {
            return Err(RatingError::EncoderDim { model: self.encoder_dim, encoder: encoder.dim() });
        }
        let x = Matrix::from_vec(1, self.encoder_dim + 1, self.features(prev_texts, current, encoder));
        let (logits, _) = self.mlp.forward(&self.store, &x)?;
        Ok(sigmoid(logits.data[0]))
    }

    pub fn save(&self, path: &Path) -> Result<(), RatingError> {
        let ck = Checkpoint {
            kind: self.kind,
            encoder_dim: self.encoder_dim,
            k_prev: self.k_prev,
            hidden: self.hidden.clone(),
            params: self.store.export_values(),
        };
        let bytes = serde_json::to_vec_pretty(&ck)
            .map_err(|e| RatingError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })?;
        write_atomic(path, &bytes)
            .map_err(|e| RatingError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, RatingError> {
        let err = |msg: String| RatingError::Checkpoint { path: path.display().to_string(), msg };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        let mut model = RatingModel::new(ck.kind, ck.encoder_dim, ck.k_prev, ck.hidden.clone(), 0);
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
struct Checkpoint {
    kind: RaterKind,
    encoder_dim: usize,
    k_prev: usize,
    hidden: Vec<usize>,
    params: BTreeMap<String, Matrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    /// 0 trains full-batch.
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { lr: 0.5, epochs: 200, batch: 0, hidden: vec![64, 32], seed: 17 }
    }
}

/// Trains one rater by minibatch gradient descent on binary cross-entropy.
/// Returns the model and the full-dataset loss before training plus after
/// each epoch (length epochs + 1).
pub fn train_rating_model(
    kind: RaterKind,
    dataset: &[RatingExample],
    encoder: &dyn TextEncoder,
    k_prev: usize,
    hyper: &TrainHyper,
) -> Result<(RatingModel, Vec<f64>), RatingError> {
    let positives = dataset.iter().filter(|e| e.label == 1).count();
    let negatives = dataset.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(RatingError::DegenerateTraining { positives, negatives });
    }
    let mut model = RatingModel::new(kind, encoder.dim(), k_prev, hyper.hidden.clone(), hyper.seed);
    let rows: Vec<Vec<f64>> = dataset
        .iter()
        .map(|e| model.features(&e.prev_texts, &e.current_text, encoder))
        .collect();
    let x_all = Matrix::from_rows(&rows);
    let y_all: Vec<f64> = dataset.iter().map(|e| e.label as f64).collect();

    let full_loss = |store: &ParamStore, mlp: &Mlp| -> Result<f64, RatingError> {
        let (logits, _) = mlp.forward(store, &x_all)?;
        let probs: Vec<f64> = logits.data.iter().map(|&z| sigmoid(z)).collect();
        Ok(bce_loss(&probs, &y_all)?)
    };

    let mut losses = Vec::with_capacity(hyper.epochs + 1);
    losses.push(full_loss(&model.store, &model.mlp)?);
    let batch = if hyper.batch == 0 { dataset.len() } else { hyper.batch };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xd1b54a32d192ed03);
    for _ in 0..hyper.epochs {
        if batch < dataset.len() {
            for i in 0..order.len() {
                let j = rng.random_range(i..order.len());
                order.swap(i, j);
            }
        }
        for chunk in order.chunks(batch) {
            let xb = Matrix::from_rows(&chunk.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>());
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
            model.mlp.backward(&mut model.store, &cache, &dlogits)?;
            model.store.sgd_step(hyper.lr)?;
        }
        losses.push(full_loss(&model.store, &model.mlp)?);
    }
    Ok((model, losses))
}
