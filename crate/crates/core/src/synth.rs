//! Synthetic interaction generator with planted, queryable ground truth.
//!
//! Every user gets a per-chunk "true" category distribution (the planted
//! preference). Positive interactions sample their category from that
//! distribution with probability 1 - noise and uniformly otherwise; negatives
//! sample from non-preferred categories. Because the trace of planted
//! distributions is kept, the fidelity of any extracted interest text is
//! measurable after the fact via [`ground_truth_overlap`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::Interaction;
use crate::encoder::tokenize;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("n_categories must be at least 2 (got {0})")]
    TooFewCategories(usize),
    #[error("n_items ({items}) must be at least n_categories ({categories}) so every category is represented")]
    TooFewItems { items: usize, categories: usize },
    #[error("noise must be in [0, 0.5) (got {0})")]
    NoiseOutOfRange(f64),
    #[error("random-walk sigma must be finite and non-negative (got {0})")]
    BadSigma(f64),
    #[error("chunk_index {index} is outside the trace (user has {chunks} chunks)")]
    BadChunkIndex { index: usize, chunks: usize },
    #[error("{0} must be at least 1")]
    MustBePositive(&'static str),
}

/// How planted preferences move over a user's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    /// Hard switch: one-hot on category A before `chunk`, one-hot on B from
    /// `chunk` onward (1-based chunk indices).
    SwitchAt { chunk: usize },
    /// Per-chunk Gaussian perturbation of preference logits, softmaxed.
    RandomWalk { sigma: f64 },
}

// Field order keeps `drift` last: TOML emits values before tables, and the
// drift enum serializes as a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_categories: usize,
    pub n_items: usize,
    pub n_users: usize,
    pub chunks_per_user: usize,
    pub chunk_len: usize,
    pub noise: f64,
    pub seed: u64,
    pub drift: Drift,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_categories: 8,
            n_items: 400,
            n_users: 200,
            chunks_per_user: 8,
            chunk_len: 25,
            drift: Drift::SwitchAt { chunk: 5 },
            noise: 0.2,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: String,
    pub title: String,
    pub category: String,
}

/// Planted per-chunk category distributions for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrace {
    pub user_id: String,
    pub per_chunk_dist: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub interactions: Vec<Interaction>,
    pub traces: Vec<GroundTruthTrace>,
    pub catalog: Vec<CatalogItem>,
}

pub fn category_token(c: usize) -> String {
    format!("cat_{c:02}")
}

fn validate(cfg: &SynthConfig) -> Result<(), SynthError> {
    if cfg.n_categories < 2 {
        return Err(SynthError::TooFewCategories(cfg.n_categories));
    }
    if cfg.n_items < cfg.n_categories {
        return Err(SynthError::TooFewItems { items: cfg.n_items, categories: cfg.n_categories });
    }
    if !(0.0..0.5).contains(&cfg.noise) {
        return Err(SynthError::NoiseOutOfRange(cfg.noise));
    }
    if cfg.n_users == 0 {
        return Err(SynthError::MustBePositive("n_users"));
    }
    if cfg.chunks_per_user == 0 {
        return Err(SynthError::MustBePositive("chunks_per_user"));
    }
    if cfg.chunk_len == 0 {
        return Err(SynthError::MustBePositive("chunk_len"));
    }
    if let Drift::RandomWalk { sigma } = cfg.drift {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(SynthError::BadSigma(sigma));
        }
    }
    Ok(())
}

// Box-Muller; enough normality for preference walks without another dep.
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn sample_from_dist<R: Rng>(dist: &[f64], rng: &mut R) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    dist.len() - 1
}

fn modal_category(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in dist.iter().enumerate() {
        if *p > dist[best] {
            best = i;
        }
    }
    best
}

/// Generates the full dataset: catalog, interactions, and the planted trace.
/// Deterministic given the config (including the seed).
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let catalog: Vec<CatalogItem> = (0..cfg.n_items)
        .map(|i| CatalogItem {
            item_id: format!("item_{i:04}"),
            title: format!("item_{i:04}"),
            category: category_token(i % cfg.n_categories),
        })
        .collect();
    let mut items_by_cat: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_categories];
    for (i, _) in catalog.iter().enumerate() {
        items_by_cat[i % cfg.n_categories].push(i);
    }

    let mut interactions = Vec::with_capacity(cfg.n_users * cfg.chunks_per_user * cfg.chunk_len);
    let mut traces = Vec::with_capacity(cfg.n_users);

    for u in 0..cfg.n_users {
        let user_id = format!("user_{u:04}");

        let per_chunk_dist: Vec<Vec<f64>> = match cfg.drift {
            Drift::SwitchAt { chunk } => {
                let a = rng.random_range(0..cfg.n_categories);
                let mut b = rng.random_range(0..cfg.n_categories - 1);
                if b >= a {
                    b += 1;
                }
                (1..=cfg.chunks_per_user)
                    .map(|c| {
                        let hot = if c < chunk { a } else { b };
                        let mut d = vec![0.0; cfg.n_categories];
                        d[hot] = 1.0;
                        d
                    })
                    .collect()
            }
            Drift::RandomWalk { sigma } => {
                let mut z: Vec<f64> = (0..cfg.n_categories).map(|_| normal(&mut rng)).collect();
                (0..cfg.chunks_per_user)
                    .map(|_| {
                        for zi in &mut z {
                            *zi += sigma * normal(&mut rng);
                        }
                        softmax(&z)
                    })
                    .collect()
            }
        };

        for (ci, dist) in per_chunk_dist.iter().enumerate() {
            let modal = modal_category(dist);
            for slot in 0..cfg.chunk_len {
                let positive = slot % 2 == 0;
                let cat = if positive {
                    if rng.random::<f64>() < cfg.noise {
                        rng.random_range(0..cfg.n_categories)
                    } else {
                        sample_from_dist(dist, &mut rng)
                    }
                } else {
                    let mut c = rng.random_range(0..cfg.n_categories - 1);
                    if c >= modal {
                        c += 1;
                    }
                    c
                };
                let idx = items_by_cat[cat][rng.random_range(0..items_by_cat[cat].len())];
                let item = &catalog[idx];
                let mut attrs = BTreeMap::new();
                attrs.insert("category".to_string(), item.category.clone());
                // Interleave users along the timeline so a global-quantile
                // split cuts the tail of every user's history, not whole users.
                let ts = (((ci * cfg.chunk_len + slot) * cfg.n_users) + u) as i64;
                interactions.push(Interaction {
                    user_id: user_id.clone(),
                    item_id: item.item_id.clone(),
                    title: item.title.clone(),
                    attrs,
                    rating: if positive { 5.0 } else { 1.0 },
                    ts,
                    label: positive,
                });
            }
        }
        traces.push(GroundTruthTrace { user_id, per_chunk_dist });
    }

    Ok(SynthDataset { interactions, traces, catalog })
}

/// Probability mass of the planted distribution for `chunk_index` (1-based)
/// covered by the category tokens present in `text`.
pub fn ground_truth_overlap(
    text: &str,
    trace: &GroundTruthTrace,
    chunk_index: usize,
) -> Result<f64, SynthError> {
    if chunk_index == 0 || chunk_index > trace.per_chunk_dist.len() {
        return Err(SynthError::BadChunkIndex {
            index: chunk_index,
            chunks: trace.per_chunk_dist.len(),
        });
    }
    let dist = &trace.per_chunk_dist[chunk_index - 1];
    let tokens: std::collections::BTreeSet<String> = tokenize(text).into_iter().collect();
    let mass = dist
        .iter()
        .enumerate()
        .filter(|(c, _)| tokens.contains(&category_token(*c)))
        .map(|(_, p)| p)
        .sum::<f64>();
    Ok(mass.clamp(0.0, 1.0))
}
