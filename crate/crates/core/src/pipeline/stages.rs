//! Stage execution.
//!
//! The stage graph, artifact by artifact:
//!
//! ```text
//! synth | ingest -> interactions.jsonl (+ ground_truth.jsonl, catalog.jsonl)
//! chunk           -> chunks.jsonl
//! cascade         -> cascade.jsonl
//! build-rating-data -> rating_train.jsonl
//! train-rating    -> srm.json, prm.json
//! search          -> interests.jsonl
//! fuse            -> ctr_samples.jsonl, fused.jsonl, fusion.json
//! train-ctr       -> ctr_model.json
//! evaluate        -> metrics.json
//! ablate          -> ablation_report.json
//! ```
//!
//! A stage whose outputs all exist is skipped unless forced, which makes a
//! sequence of stage invocations resumable. Within a stage, per-user work
//! fans out over a worker pool and merges back in input order, so the worker
//! count never changes any artifact byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::behavior::{
    chunk_history, filter_min_interactions, ingest, time_split, BehaviorChunk, ChunkSequence,
    Interaction, UserHistory,
};
use crate::ctr::{
    evaluate, run_ablation, train_ctr, train_joint, AblationInputs, AblationOptions, CtrConfig,
    CtrHyper, CtrModel, CtrSample, JointInputs, UserFusion,
};
use crate::encoder::{fnv1a, HashEncoder, TextEncoder};
use crate::fusion::{encode_interests, item_knowledge_vector, weight_and_position};
use crate::gateway::{
    render_prompt, Gateway, GenRequest, PromptContext, PromptKind, PromptLimits,
};
use crate::nn::Matrix;
use crate::rating::{
    build_rating_datasets, train_rating_model, CascadeStep, CascadeUser, ExampleKind, RaterKind,
    RatingExample, RatingModel, TrainHyper,
};
use crate::synth::generate_dataset;
use crate::tree::{run_search, EncodedRater, NodeRecord, SearchConfig};

use super::artifacts::{
    read_jsonl, write_json, write_jsonl, CascadeRecord, CtrSampleRecord, FusedRecord,
    GroundTruthRecord, Split, ABLATION, CASCADE, CATALOG, CHUNKS, CTR_MODEL, CTR_SAMPLES, FUSED,
    FUSION_PARAMS, GROUND_TRUTH, INTERACTIONS, INTERESTS, METRICS, PRM, RATING_TRAIN, SRM,
};
use super::config::{PipelineConfig, SourceKind};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Synth,
    Chunk,
    Cascade,
    BuildRatingData,
    TrainRating,
    Search,
    Fuse,
    TrainCtr,
    Evaluate,
    Ablate,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::Synth,
        Stage::Chunk,
        Stage::Cascade,
        Stage::BuildRatingData,
        Stage::TrainRating,
        Stage::Search,
        Stage::Fuse,
        Stage::TrainCtr,
        Stage::Evaluate,
        Stage::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Synth => "synth",
            Stage::Chunk => "chunk",
            Stage::Cascade => "cascade",
            Stage::BuildRatingData => "build-rating-data",
            Stage::TrainRating => "train-rating",
            Stage::Search => "search",
            Stage::Fuse => "fuse",
            Stage::TrainCtr => "train-ctr",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.iter().copied().find(|s| s.name() == name)
    }

    /// The artifact files the stage publishes into the run directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[INTERACTIONS],
            Stage::Synth => &[INTERACTIONS, GROUND_TRUTH, CATALOG],
            Stage::Chunk => &[CHUNKS],
            Stage::Cascade => &[CASCADE],
            Stage::BuildRatingData => &[RATING_TRAIN],
            Stage::TrainRating => &[SRM, PRM],
            Stage::Search => &[INTERESTS],
            Stage::Fuse => &[CTR_SAMPLES, FUSED, FUSION_PARAMS],
            Stage::TrainCtr => &[CTR_MODEL],
            Stage::Evaluate => &[METRICS],
            Stage::Ablate => &[ABLATION],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// All outputs already exist and `force` is off.
    UpToDate,
}

pub struct StageContext {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub force: bool,
}

impl StageContext {
    /// `workers` beats the config when given (the CLI flag).
    pub fn new(config: PipelineConfig, workers: Option<usize>, force: bool) -> Self {
        let out_dir = config.run.out_dir.clone();
        let workers = workers.unwrap_or(config.run.workers).max(1);
        StageContext { config, out_dir, workers, force }
    }

    pub fn artifact_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn require(&self, name: &'static str, producer: &'static str) -> Result<PathBuf, PipelineError> {
        let path = self.artifact_path(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingUpstream { artifact: name.to_string(), producer })
        }
    }

    fn interactions_producer(&self) -> &'static str {
        match self.config.data.source {
            SourceKind::Synth => "synth",
            SourceKind::Jsonl => "ingest",
        }
    }

    fn gateway(&self) -> Result<Gateway, PipelineError> {
        let env_cache = std::env::var_os("HITLBM_CACHE_DIR").map(PathBuf::from);
        Ok(Gateway::from_descriptor(&self.config.backend, env_cache)?)
    }

    fn encoder(&self) -> HashEncoder {
        HashEncoder::new(self.config.encoder.d, self.config.encoder.seed)
    }

    fn limits(&self) -> PromptLimits {
        PromptLimits { k_prev: self.config.rating.k, max_chars: self.config.prompt.max_chars }
    }

    /// interactions.jsonl with labels re-derived from the configured policy.
    fn load_interactions(&self) -> Result<Vec<Interaction>, PipelineError> {
        let path = self.require(INTERACTIONS, self.interactions_producer())?;
        let mut rows: Vec<Interaction> = read_jsonl(&path)?;
        for r in &mut rows {
            r.label = self.config.data.label.label(r.rating);
        }
        Ok(rows)
    }

    fn load_chunks(&self) -> Result<Vec<ChunkSequence>, PipelineError> {
        let path = self.require(CHUNKS, "chunk")?;
        let mut chunks: Vec<BehaviorChunk> = read_jsonl(&path)?;
        for c in &mut chunks {
            for it in &mut c.items {
                it.label = self.config.data.label.label(it.rating);
            }
        }
        let mut by_user: BTreeMap<String, Vec<BehaviorChunk>> = BTreeMap::new();
        for c in chunks {
            by_user.entry(c.user_id.clone()).or_default().push(c);
        }
        Ok(by_user
            .into_iter()
            .map(|(user_id, mut chunks)| {
                chunks.sort_by_key(|c| c.chunk_index);
                ChunkSequence { user_id, chunks }
            })
            .collect())
    }
}

pub fn run_stage(ctx: &StageContext, stage: Stage) -> Result<StageOutcome, PipelineError> {
    if !ctx.force && stage.outputs().iter().all(|n| ctx.artifact_path(n).exists()) {
        return Ok(StageOutcome::UpToDate);
    }
    match stage {
        Stage::Ingest => stage_ingest(ctx)?,
        Stage::Synth => stage_synth(ctx)?,
        Stage::Chunk => stage_chunk(ctx)?,
        Stage::Cascade => stage_cascade(ctx)?,
        Stage::BuildRatingData => stage_build_rating_data(ctx)?,
        Stage::TrainRating => stage_train_rating(ctx)?,
        Stage::Search => stage_search(ctx)?,
        Stage::Fuse => stage_fuse(ctx)?,
        Stage::TrainCtr => stage_train_ctr(ctx)?,
        Stage::Evaluate => stage_evaluate(ctx)?,
        Stage::Ablate => stage_ablate(ctx)?,
    }
    Ok(StageOutcome::Ran)
}

/// Fans `f` out over a scoped thread pool and returns results in input
/// order, so parallelism never reorders artifacts.
fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    if workers <= 1 || items.len() <= 1 {
        for (item, slot) in items.iter().zip(slots.iter_mut()) {
            *slot = Some(f(item));
        }
    } else {
        let block = items.len().div_ceil(workers).max(1);
        let f = &f;
        std::thread::scope(|s| {
            for (chunk, out) in items.chunks(block).zip(slots.chunks_mut(block)) {
                s.spawn(move || {
                    for (item, slot) in chunk.iter().zip(out.iter_mut()) {
                        *slot = Some(f(item));
                    }
                });
            }
        });
    }
    slots.into_iter().map(|s| s.expect("every slot is filled")).collect()
}

fn canonical_order(rows: &mut [Interaction]) {
    rows.sort_by(|a, b| (a.ts, &a.user_id, &a.item_id).cmp(&(b.ts, &b.user_id, &b.item_id)));
}

fn stage_synth(ctx: &StageContext) -> Result<(), PipelineError> {
    if ctx.config.data.source != SourceKind::Synth {
        return Err(PipelineError::Contract(
            "data.source is \"jsonl\"; the ingest stage provides interactions here".into(),
        ));
    }
    let dataset = generate_dataset(&ctx.config.synth)?;
    let mut rows = dataset.interactions;
    canonical_order(&mut rows);
    write_jsonl(&ctx.artifact_path(INTERACTIONS), &rows)?;
    let truth: Vec<GroundTruthRecord> = dataset
        .traces
        .iter()
        .flat_map(|t| {
            t.per_chunk_dist.iter().enumerate().map(|(i, dist)| GroundTruthRecord {
                user_id: t.user_id.clone(),
                chunk_index: i + 1,
                dist: dist.clone(),
            })
        })
        .collect();
    write_jsonl(&ctx.artifact_path(GROUND_TRUTH), &truth)?;
    write_jsonl(&ctx.artifact_path(CATALOG), &dataset.catalog)
}

fn stage_ingest(ctx: &StageContext) -> Result<(), PipelineError> {
    if ctx.config.data.source != SourceKind::Jsonl {
        return Err(PipelineError::Contract(
            "data.source is \"synth\"; the synth stage provides interactions here".into(),
        ));
    }
    let src = PathBuf::from(&ctx.config.data.path);
    let histories = ingest(&src, &ctx.config.data.label)?;
    let mut rows: Vec<Interaction> = histories.into_iter().flat_map(|h| h.items).collect();
    canonical_order(&mut rows);
    write_jsonl(&ctx.artifact_path(INTERACTIONS), &rows)
}

/// Full per-user histories (after the review floor) cut into length-L
/// chunks. The time split only partitions click samples later; interest
/// extraction always sees the whole lifelong sequence.
fn stage_chunk(ctx: &StageContext) -> Result<(), PipelineError> {
    let rows = ctx.load_interactions()?;
    let mut by_user: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for r in rows {
        by_user.entry(r.user_id.clone()).or_default().push(r);
    }
    let histories: Vec<UserHistory> =
        by_user.into_iter().map(|(user_id, items)| UserHistory { user_id, items }).collect();
    let histories = filter_min_interactions(histories, ctx.config.data.min_reviews);
    let mut out: Vec<BehaviorChunk> = Vec::new();
    for h in &histories {
        out.extend(chunk_history(h, ctx.config.chunk.l)?.chunks);
    }
    write_jsonl(&ctx.artifact_path(CHUNKS), &out)
}

/// The plain sequential pass: one interest per chunk, each conditioned on
/// the previous one. Candidates come from the same best-of-N request the
/// search stage uses, but here one is drawn uniformly (seeded), because this
/// pass exists to measure what selection-free extraction produces.
fn stage_cascade(ctx: &StageContext) -> Result<(), PipelineError> {
    let users = ctx.load_chunks()?;
    let gateway = ctx.gateway()?;
    let limits = ctx.limits();
    let n = ctx.config.search.n_expand;
    let seed = ctx.config.rating.seed;
    let outs = par_map(&users, ctx.workers, |user| -> Result<Vec<CascadeRecord>, PipelineError> {
        let mut prev: Vec<String> = Vec::new();
        let mut records = Vec::with_capacity(user.chunks.len());
        for chunk in &user.chunks {
            let prompt_ctx =
                PromptContext { prev_interests: &prev, chunk: Some(chunk), ..Default::default() };
            let rendered = render_prompt(PromptKind::Interest, &prompt_ctx, &limits)?;
            let mut req_seed = fnv1a(user.user_id.as_bytes(), seed);
            req_seed ^= (chunk.chunk_index as u64).wrapping_mul(0x9e3779b97f4a7c15);
            let req = GenRequest {
                kind: PromptKind::Interest,
                rendered,
                n,
                temperature: 1.0,
                seed: req_seed,
                max_tokens: 256,
            };
            let candidates = gateway.sample_candidates(&req)?;
            let mut draw = ChaCha8Rng::seed_from_u64(req_seed ^ 0x5851f42d4c957f2d);
            let text = candidates[draw.random_range(0..candidates.len())].clone();
            records.push(CascadeRecord {
                user_id: user.user_id.clone(),
                chunk_index: chunk.chunk_index,
                interest_text: text.clone(),
            });
            prev.push(text);
        }
        Ok(records)
    });
    let mut rows = Vec::new();
    for out in outs {
        rows.extend(out?);
    }
    write_jsonl(&ctx.artifact_path(CASCADE), &rows)
}

fn stage_build_rating_data(ctx: &StageContext) -> Result<(), PipelineError> {
    let users = ctx.load_chunks()?;
    let cascade_path = ctx.require(CASCADE, "cascade")?;
    let cascade_rows: Vec<CascadeRecord> = read_jsonl(&cascade_path)?;
    let mut texts: BTreeMap<(String, usize), String> = BTreeMap::new();
    for r in cascade_rows {
        texts.insert((r.user_id, r.chunk_index), r.interest_text);
    }
    let mut cascade = Vec::with_capacity(users.len());
    for user in users {
        let mut steps = Vec::with_capacity(user.chunks.len());
        for chunk in user.chunks {
            let key = (user.user_id.clone(), chunk.chunk_index);
            let Some(interest_text) = texts.get(&key).cloned() else {
                return Err(PipelineError::Contract(format!(
                    "{CASCADE} has no interest for user {} chunk {}; \
                     rerun the cascade stage with --force",
                    user.user_id, chunk.chunk_index
                )));
            };
            steps.push(CascadeStep { chunk, interest_text });
        }
        cascade.push(CascadeUser { user_id: user.user_id, steps });
    }
    let gateway = ctx.gateway()?;
    let limits = ctx.limits();
    let (cont, eff) = build_rating_datasets(
        &cascade,
        ctx.config.rating.n_eval,
        ctx.config.rating.k,
        ctx.config.rating.seed,
        &gateway,
        &limits,
        ctx.workers,
    )?;
    let mut rows = cont;
    rows.extend(eff);
    write_jsonl(&ctx.artifact_path(RATING_TRAIN), &rows)
}

fn stage_train_rating(ctx: &StageContext) -> Result<(), PipelineError> {
    let path = ctx.require(RATING_TRAIN, "build-rating-data")?;
    let rows: Vec<RatingExample> = read_jsonl(&path)?;
    let cont: Vec<RatingExample> =
        rows.iter().filter(|r| r.kind == ExampleKind::Cont).cloned().collect();
    let eff: Vec<RatingExample> =
        rows.iter().filter(|r| r.kind == ExampleKind::Eff).cloned().collect();
    let encoder = ctx.encoder();
    let hyper = TrainHyper {
        lr: ctx.config.rating.lr,
        epochs: ctx.config.rating.epochs,
        batch: ctx.config.rating.batch,
        hidden: ctx.config.rating.hidden.clone(),
        seed: ctx.config.rating.seed,
    };
    let (srm, _) =
        train_rating_model(RaterKind::Srm, &cont, &encoder, ctx.config.rating.k, &hyper)?;
    srm.save(&ctx.artifact_path(SRM))?;
    let (prm, _) =
        train_rating_model(RaterKind::Prm, &eff, &encoder, ctx.config.rating.k, &hyper)?;
    prm.save(&ctx.artifact_path(PRM))?;
    Ok(())
}

fn stage_search(ctx: &StageContext) -> Result<(), PipelineError> {
    let users = ctx.load_chunks()?;
    let srm = RatingModel::load(&ctx.require(SRM, "train-rating")?)?;
    let prm = RatingModel::load(&ctx.require(PRM, "train-rating")?)?;
    let encoder = ctx.encoder();
    let gateway = ctx.gateway()?;
    let limits = ctx.limits();
    let cfg = SearchConfig {
        n_expand: ctx.config.search.n_expand,
        k_prev: ctx.config.rating.k,
        alpha: ctx.config.search.alpha,
        seed: ctx.config.search.seed,
    };
    let outs = par_map(&users, ctx.workers, |user| -> Result<Vec<NodeRecord>, PipelineError> {
        let srm_rater = EncodedRater { model: &srm, encoder: &encoder };
        let prm_rater = EncodedRater { model: &prm, encoder: &encoder };
        let outcome = run_search(user, &cfg, &gateway, &srm_rater, &prm_rater, &limits)?;
        Ok(outcome.tree.records())
    });
    let mut rows = Vec::new();
    for out in outs {
        rows.extend(out?);
    }
    write_jsonl(&ctx.artifact_path(INTERESTS), &rows)
}

/// Selected-path texts and scores per user, oldest first.
fn selected_paths(
    records: &[NodeRecord],
) -> Result<BTreeMap<String, (Vec<String>, Vec<f64>)>, PipelineError> {
    let mut by_user: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    // Layer 0 is the empty root, selected by construction but not an interest.
    for r in records.iter().filter(|r| r.selected && r.layer > 0) {
        let Some(score) = r.s_final else {
            return Err(PipelineError::Contract(format!(
                "{INTERESTS} holds a selected node without a final score (user {}, node {})",
                r.user_id, r.node_id
            )));
        };
        by_user.entry(r.user_id.clone()).or_default().push((r.layer, r.text.clone(), score));
    }
    Ok(by_user
        .into_iter()
        .map(|(user, mut entries)| {
            entries.sort_by_key(|(layer, _, _)| *layer);
            let texts = entries.iter().map(|(_, t, _)| t.clone()).collect();
            let scores = entries.iter().map(|(_, _, s)| *s).collect();
            (user, (texts, scores))
        })
        .collect())
}

/// Builds one click sample per interaction of every covered user: the label
/// from the policy, the previous (at most W) item ids as the recent window,
/// and the side of the global time split the interaction falls on. Ties at
/// the split boundary go to test.
fn build_ctr_samples(
    all: &[Interaction],
    covered: &BTreeSet<String>,
    w: usize,
    ratio: f64,
) -> Result<Vec<CtrSampleRecord>, PipelineError> {
    let (train, _) = time_split(all, ratio)?;
    let boundary: Option<(i64, String, String)> = if train.len() == all.len() {
        None
    } else {
        let mut sorted: Vec<&Interaction> = all.iter().collect();
        sorted.sort_by(|a, b| (a.ts, &a.user_id, &a.item_id).cmp(&(b.ts, &b.user_id, &b.item_id)));
        let b = sorted[train.len()];
        Some((b.ts, b.user_id.clone(), b.item_id.clone()))
    };
    let is_test = |r: &Interaction| match &boundary {
        None => false,
        Some((ts, uid, iid)) => (r.ts, &r.user_id, &r.item_id) >= (*ts, uid, iid),
    };
    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for r in all {
        if covered.contains(&r.user_id) {
            by_user.entry(&r.user_id).or_default().push(r);
        }
    }
    let mut out = Vec::new();
    for (_, mut items) in by_user {
        items.sort_by(|a, b| (a.ts, &a.item_id).cmp(&(b.ts, &b.item_id)));
        let mut recent: Vec<String> = Vec::new();
        for r in items {
            let mut sample = CtrSample {
                user_id: r.user_id.clone(),
                item_id: r.item_id.clone(),
                recent_item_ids: recent.clone(),
                label: u8::from(r.label),
                e_user: None,
                e_item: None,
            };
            sample.clamp_recent(w);
            let split = if is_test(r) { Split::Test } else { Split::Train };
            out.push(CtrSampleRecord { split, sample });
            recent.push(r.item_id.clone());
            if recent.len() > w {
                recent.remove(0);
            }
        }
    }
    Ok(out)
}

/// Keeps at most `cap` samples, drawn without replacement by seed, in their
/// original order. 0 means no cap.
fn cap_samples(samples: Vec<CtrSample>, cap: usize, seed: u64) -> Vec<CtrSample> {
    if cap == 0 || samples.len() <= cap {
        return samples;
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b54a32d192ed03);
    for i in 0..cap {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut keep = idx[..cap].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| samples[i].clone()).collect()
}

/// One knowledge vector per distinct target item, from the item prompt.
fn item_vectors(
    items: &BTreeSet<String>,
    all: &[Interaction],
    gateway: &Gateway,
    encoder: &dyn TextEncoder,
    limits: &PromptLimits,
    workers: usize,
) -> Result<BTreeMap<String, Vec<f64>>, PipelineError> {
    let mut first: BTreeMap<&str, &Interaction> = BTreeMap::new();
    for r in all {
        first.entry(&r.item_id).or_insert(r);
    }
    let wanted: Vec<&Interaction> = items
        .iter()
        .map(|id| {
            first.get(id.as_str()).copied().ok_or_else(|| {
                PipelineError::Contract(format!("item {id} has no interaction to describe"))
            })
        })
        .collect::<Result<_, _>>()?;
    let vecs = par_map(&wanted, workers, |r| {
        item_knowledge_vector(r, gateway, encoder, limits).map_err(PipelineError::from)
    });
    let mut out = BTreeMap::new();
    for (id, v) in items.iter().zip(vecs) {
        out.insert(id.clone(), v?);
    }
    Ok(out)
}

/// Prepared interest rows per user: encoded selected-path texts, weighted by
/// selection score, plus position codes.
fn searched_user_rows(
    paths: &BTreeMap<String, (Vec<String>, Vec<f64>)>,
    encoder: &dyn TextEncoder,
    d: usize,
) -> Result<BTreeMap<String, Matrix>, PipelineError> {
    let mut rows = BTreeMap::new();
    for (user, (texts, scores)) in paths {
        let e = encode_interests(texts, encoder, d)?;
        rows.insert(user.clone(), weight_and_position(&e, scores)?);
    }
    Ok(rows)
}

/// Builds click samples, trains the fusion stack jointly with a click head,
/// and freezes one fused vector pair per (user, item).
fn stage_fuse(ctx: &StageContext) -> Result<(), PipelineError> {
    let interests: Vec<NodeRecord> = read_jsonl(&ctx.require(INTERESTS, "search")?)?;
    let all = ctx.load_interactions()?;
    let paths = selected_paths(&interests)?;
    let covered: BTreeSet<String> = paths.keys().cloned().collect();
    if covered.is_empty() {
        return Err(PipelineError::Contract(format!(
            "{INTERESTS} holds no selected interests; nothing to fuse"
        )));
    }
    let encoder = ctx.encoder();
    let d = ctx.config.encoder.d;
    let user_rows = searched_user_rows(&paths, &encoder, d)?;

    let records =
        build_ctr_samples(&all, &covered, ctx.config.ctr.w, ctx.config.data.split_ratio)?;
    let gateway = ctx.gateway()?;
    let limits = ctx.limits();
    let item_ids: BTreeSet<String> =
        records.iter().map(|r| r.sample.item_id.clone()).collect();
    let item_vecs = item_vectors(&item_ids, &all, &gateway, &encoder, &limits, ctx.workers)?;

    let train: Vec<CtrSample> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.sample.clone())
        .collect();
    let train = cap_samples(train, ctx.config.ctr.max_train_samples, ctx.config.fusion.seed);
    let hyper = CtrHyper {
        lr: ctx.config.fusion.lr,
        epochs: ctx.config.fusion.epochs,
        batch: ctx.config.fusion.batch,
        seed: ctx.config.fusion.seed,
    };
    let inputs = JointInputs { user_rows: &user_rows, item_vecs: &item_vecs };
    let (joint, _) = train_joint(
        &train,
        &inputs,
        UserFusion::TemporalStack(ctx.config.fusion.cross_form),
        ctx.config.ctr.d_id,
        d,
        &ctx.config.ctr.hidden,
        &hyper,
    )?;
    joint.save(&ctx.artifact_path(FUSION_PARAMS))?;

    let pairs: BTreeSet<(String, String)> = records
        .iter()
        .map(|r| (r.sample.user_id.clone(), r.sample.item_id.clone()))
        .collect();
    let mut fused = Vec::with_capacity(pairs.len());
    for (user_id, item_id) in pairs {
        let rows = &user_rows[&user_id];
        let e_item = &item_vecs[&item_id];
        let e_user = joint.fused_vector(rows, e_item)?;
        fused.push(FusedRecord { user_id, item_id, e_user, e_item: e_item.clone() });
    }
    write_jsonl(&ctx.artifact_path(FUSED), &fused)?;
    write_jsonl(&ctx.artifact_path(CTR_SAMPLES), &records)
}

fn load_samples_with_sides(
    ctx: &StageContext,
) -> Result<(Vec<CtrSample>, Vec<CtrSample>), PipelineError> {
    let records: Vec<CtrSampleRecord> = read_jsonl(&ctx.require(CTR_SAMPLES, "fuse")?)?;
    let fused: Vec<FusedRecord> = read_jsonl(&ctx.require(FUSED, "fuse")?)?;
    let mut sides: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for f in fused {
        sides.insert((f.user_id, f.item_id), (f.e_user, f.e_item));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        let key = (r.sample.user_id.clone(), r.sample.item_id.clone());
        let Some((e_user, e_item)) = sides.get(&key) else {
            return Err(PipelineError::Contract(format!(
                "{FUSED} has no vectors for user {} item {}; rerun the fuse stage with --force",
                key.0, key.1
            )));
        };
        let mut s = r.sample;
        s.e_user = Some(e_user.clone());
        s.e_item = Some(e_item.clone());
        match r.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok((train, test))
}

fn stage_train_ctr(ctx: &StageContext) -> Result<(), PipelineError> {
    let (train, _) = load_samples_with_sides(ctx)?;
    let train = cap_samples(train, ctx.config.ctr.max_train_samples, ctx.config.ctr.seed);
    let config = CtrConfig {
        d_id: ctx.config.ctr.d_id,
        side_dim: ctx.config.encoder.d,
        use_e_user: true,
        use_e_item: true,
        hidden: ctx.config.ctr.hidden.clone(),
    };
    let hyper = CtrHyper {
        lr: ctx.config.ctr.lr,
        epochs: ctx.config.ctr.epochs,
        batch: ctx.config.ctr.batch,
        seed: ctx.config.ctr.seed,
    };
    let (model, _) = train_ctr(&train, config, &hyper)?;
    model.save(&ctx.artifact_path(CTR_MODEL))?;
    Ok(())
}

fn stage_evaluate(ctx: &StageContext) -> Result<(), PipelineError> {
    let model = CtrModel::load(&ctx.require(CTR_MODEL, "train-ctr")?)?;
    let (_, test) = load_samples_with_sides(ctx)?;
    let metrics = evaluate(&model, &test)?;
    write_json(&ctx.artifact_path(METRICS), &metrics)
}

/// The ladder: base ids, +mean-pooled cascade interests, +temporal fusion
/// over cascade interests, +temporal fusion over searched interests. Rungs
/// whose upstream artifacts are missing become skip rows, not failures.
fn stage_ablate(ctx: &StageContext) -> Result<(), PipelineError> {
    let records: Vec<CtrSampleRecord> = read_jsonl(&ctx.require(CTR_SAMPLES, "fuse")?)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        match r.split {
            Split::Train => train.push(r.sample),
            Split::Test => test.push(r.sample),
        }
    }
    let train =
        cap_samples(train, ctx.config.ctr.max_train_samples, ctx.config.ctr.ablation_seed);

    let encoder = ctx.encoder();
    let d = ctx.config.encoder.d;

    let cascade_path = ctx.artifact_path(CASCADE);
    let mut cube_user_vecs: Option<BTreeMap<String, Vec<f64>>> = None;
    let mut tif_user_rows: Option<BTreeMap<String, Matrix>> = None;
    if cascade_path.exists() {
        let rows: Vec<CascadeRecord> = read_jsonl(&cascade_path)?;
        let mut by_user: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
        for r in rows {
            by_user.entry(r.user_id).or_default().push((r.chunk_index, r.interest_text));
        }
        let mut vecs = BTreeMap::new();
        let mut rows_map = BTreeMap::new();
        for (user, mut entries) in by_user {
            entries.sort_by_key(|(i, _)| *i);
            let texts: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
            let e = encode_interests(&texts, &encoder, d)?;
            let mut mean = vec![0.0; d];
            for j in 0..e.rows {
                for (acc, v) in mean.iter_mut().zip(e.row(j)) {
                    *acc += v;
                }
            }
            for v in &mut mean {
                *v /= e.rows as f64;
            }
            vecs.insert(user.clone(), mean);
            // Uniform weights: the cascade path carries no selection scores.
            rows_map.insert(user, weight_and_position(&e, &vec![1.0; texts.len()])?);
        }
        cube_user_vecs = Some(vecs);
        tif_user_rows = Some(rows_map);
    }

    let interests_path = ctx.artifact_path(INTERESTS);
    let mut hts_user_rows: Option<BTreeMap<String, Matrix>> = None;
    let mut hts_raw_rows: Option<BTreeMap<String, Matrix>> = None;
    if interests_path.exists() {
        let records: Vec<NodeRecord> = read_jsonl(&interests_path)?;
        let paths = selected_paths(&records)?;
        hts_user_rows = Some(searched_user_rows(&paths, &encoder, d)?);
        if ctx.config.ctr.fusion_variants {
            let mut raw = BTreeMap::new();
            for (user, (texts, _)) in &paths {
                raw.insert(user.clone(), encode_interests(texts, &encoder, d)?);
            }
            hts_raw_rows = Some(raw);
        }
    }

    let all = ctx.load_interactions()?;
    let gateway = ctx.gateway()?;
    let limits = ctx.limits();
    let item_ids: BTreeSet<String> =
        train.iter().chain(&test).map(|s| s.item_id.clone()).collect();
    let item_vecs = item_vectors(&item_ids, &all, &gateway, &encoder, &limits, ctx.workers)?;

    let inputs = AblationInputs {
        train: &train,
        test: &test,
        cube_user_vecs: cube_user_vecs.as_ref(),
        tif_user_rows: tif_user_rows.as_ref(),
        hts_user_rows: hts_user_rows.as_ref(),
        hts_raw_rows: hts_raw_rows.as_ref(),
        item_vecs: Some(&item_vecs),
    };
    let opts = AblationOptions {
        d_id: ctx.config.ctr.d_id,
        side_dim: d,
        hidden: ctx.config.ctr.hidden.clone(),
        hyper: CtrHyper {
            lr: ctx.config.ctr.lr,
            epochs: ctx.config.ctr.epochs,
            batch: ctx.config.ctr.batch,
            seed: ctx.config.ctr.ablation_seed,
        },
        seed: ctx.config.ctr.ablation_seed,
        cross_form: ctx.config.fusion.cross_form,
        fusion_variants: ctx.config.ctr.fusion_variants,
    };
    let report = run_ablation(&inputs, &opts);
    write_json(&ctx.artifact_path(ABLATION), &report)
}
