//! Temporal fusion of a user's interest trajectory into a single vector.
//!
//! A user who went through the search phase has one interest summary per
//! chunk, each with the score its selection was based on. Fusion turns that
//! ordered list into one user vector conditioned on a target item:
//!
//! 1. encode every summary into a d-dim embedding,
//! 2. scale each row by its score and add a sinusoidal position code,
//! 3. run causal self-attention so later interests see earlier ones,
//! 4. attend from the target item's knowledge embedding over the refined
//!    rows to pool them into `e_user`.
//!
//! Everything here is differentiable; the stack trains jointly with the
//! click head that consumes its output. Forward passes return caches and
//! `backward` routes gradients into a shared [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::Interaction;
use crate::encoder::TextEncoder;
use crate::gateway::{
    render_prompt, Gateway, GatewayError, GenRequest, PromptContext, PromptKind, PromptLimits,
};
use crate::nn::{
    attention, attention_backward, AttnCache, Matrix, NnError, ParamStore,
};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no interest summaries to fuse")]
    NoInterests,
    #[error("embedding dim {got} does not match configured dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{rows} interest rows but {scores} scores")]
    LengthMismatch { rows: usize, scores: usize },
    #[error("score {value} at position {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("fused output contains a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Fixed sinusoidal position codes, one row per sequence position.
///
/// Column 2i holds sin(j / 10000^(2i/d)) and column 2i+1 the matching cos,
/// so row 0 is [0, 1, 0, 1, ...]. Nothing here is learned; determinism of
/// the pipeline leans on that.
pub fn sinusoidal_positions(t_len: usize, d: usize) -> Matrix {
    let mut out = Matrix::zeros(t_len, d);
    for j in 0..t_len {
        for c in 0..d {
            let pair = (c / 2) as f64;
            let angle = j as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            *out.at_mut(j, c) = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Encode interest summaries into a T x d matrix, oldest summary first.
pub fn encode_interests(
    texts: &[String],
    encoder: &dyn TextEncoder,
    d: usize,
) -> Result<Matrix, FusionError> {
    if texts.is_empty() {
        return Err(FusionError::NoInterests);
    }
    if encoder.dim() != d {
        return Err(FusionError::DimMismatch { expected: d, got: encoder.dim() });
    }
    let rows: Vec<Vec<f64>> = texts.iter().map(|t| encoder.encode(t)).collect();
    Ok(Matrix::from_rows(&rows))
}

/// r_j = e_j * s_j + pos_j. Scores must sit in [0, 1]; a zero score leaves
/// the bare position code so a worthless interest still occupies its slot.
pub fn weight_and_position(e: &Matrix, scores: &[f64]) -> Result<Matrix, FusionError> {
    if e.rows != scores.len() {
        return Err(FusionError::LengthMismatch { rows: e.rows, scores: scores.len() });
    }
    if e.rows == 0 {
        return Err(FusionError::NoInterests);
    }
    for (index, &value) in scores.iter().enumerate() {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(FusionError::ScoreOutOfRange { index, value });
        }
    }
    let pos = sinusoidal_positions(e.rows, e.cols);
    let mut r = Matrix::zeros(e.rows, e.cols);
    for j in 0..e.rows {
        for c in 0..e.cols {
            *r.at_mut(j, c) = e.at(j, c) * scores[j] + pos.at(j, c);
        }
    }
    Ok(r)
}

/// A user's encoded interest trajectory before attention.
#[derive(Debug, Clone)]
pub struct InterestSequenceEmbedding {
    pub user_id: String,
    /// T x d raw summary embeddings, oldest first.
    pub e: Matrix,
    /// Selection score per summary, in [0, 1].
    pub scores: Vec<f64>,
    /// T x d sinusoidal codes matching `e` row for row.
    pub positions: Matrix,
}

impl InterestSequenceEmbedding {
    pub fn build(
        user_id: &str,
        texts: &[String],
        scores: &[f64],
        encoder: &dyn TextEncoder,
        d: usize,
    ) -> Result<Self, FusionError> {
        let e = encode_interests(texts, encoder, d)?;
        if e.rows != scores.len() {
            return Err(FusionError::LengthMismatch { rows: e.rows, scores: scores.len() });
        }
        let positions = sinusoidal_positions(e.rows, d);
        Ok(Self { user_id: user_id.to_string(), e, scores: scores.to_vec(), positions })
    }

    /// The score-weighted, position-coded rows fed to self-attention.
    pub fn weighted(&self) -> Result<Matrix, FusionError> {
        weight_and_position(&self.e, &self.scores)
    }
}

/// Lower-triangular attention mask: row j may attend to positions <= j.
/// Entry 1 marks a blocked pair, matching the nn masking convention.
pub fn causal_mask(t_len: usize) -> Matrix {
    let mut m = Matrix::zeros(t_len, t_len);
    for j in 0..t_len {
        for jp in (j + 1)..t_len {
            *m.at_mut(j, jp) = 1.0;
        }
    }
    m
}

pub struct MsaCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: AttnCache,
}

/// Causal self-attention over the weighted rows.
///
/// Row j of the output mixes value projections of rows 0..=j only; later
/// rows contribute exactly nothing, probability and gradient both. With a
/// single row the output is just r_0 W_v.
pub fn masked_self_attention(
    r: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
) -> Result<(Matrix, MsaCache), FusionError> {
    if r.rows == 0 {
        return Err(FusionError::NoInterests);
    }
    let q = r.matmul(wq)?;
    let k = r.matmul(wk)?;
    let v = r.matmul(wv)?;
    let mask = causal_mask(r.rows);
    let (out, attn) = attention(&q, &k, &v, Some(&mask))?;
    Ok((out, MsaCache { q, k, v, attn }))
}

/// Gradients of [`masked_self_attention`]: (dr, dwq, dwk, dwv).
pub fn masked_self_attention_backward(
    r: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    cache: &MsaCache,
    dy: &Matrix,
) -> Result<(Matrix, Matrix, Matrix, Matrix), FusionError> {
    let (dq, dk, dv) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.attn, dy)?;
    let dwq = r.matmul_at(&dq)?;
    let dwk = r.matmul_at(&dk)?;
    let dwv = r.matmul_at(&dv)?;
    let mut dr = dq.matmul_bt(wq)?;
    dr.add_assign(&dk.matmul_bt(wk)?);
    dr.add_assign(&dv.matmul_bt(wv)?);
    Ok((dr, dwq, dwk, dwv))
}

/// How the target item is combined with the refined interest rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttentionForm {
    /// The item embedding is the query; attention weights spread over the
    /// interest rows and pool them. Default.
    ItemAsQuery,
    /// Interest rows are the queries against the single item key, then the
    /// per-row outputs are mean-pooled. With one key every softmax weight
    /// is 1, so e_user collapses to the item's value projection no matter
    /// what the interests say. Kept selectable for comparison runs.
    RowsAsQueries,
}

pub struct CrossCache {
    form: CrossAttentionForm,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: AttnCache,
}

impl CrossCache {
    /// Attention weights over interest rows (item-as-query form only).
    pub fn weights(&self) -> &[f64] {
        self.attn.probs.row(0)
    }
}

/// Pool the refined rows into e_user, conditioned on the item embedding.
pub fn target_cross_attention(
    r_star: &Matrix,
    e_item: &[f64],
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    form: CrossAttentionForm,
) -> Result<(Vec<f64>, CrossCache), FusionError> {
    if r_star.rows == 0 {
        return Err(FusionError::NoInterests);
    }
    if e_item.len() != r_star.cols {
        return Err(FusionError::DimMismatch { expected: r_star.cols, got: e_item.len() });
    }
    let item = Matrix::from_rows(&[e_item.to_vec()]);
    match form {
        CrossAttentionForm::ItemAsQuery => {
            let q = item.matmul(wq)?;
            let k = r_star.matmul(wk)?;
            let v = r_star.matmul(wv)?;
            let (out, attn) = attention(&q, &k, &v, None)?;
            let e_user = out.row(0).to_vec();
            Ok((e_user, CrossCache { form, q, k, v, attn }))
        }
        CrossAttentionForm::RowsAsQueries => {
            let q = r_star.matmul(wq)?;
            let k = item.matmul(wk)?;
            let v = item.matmul(wv)?;
            let (out, attn) = attention(&q, &k, &v, None)?;
            let mut e_user = vec![0.0; out.cols];
            for j in 0..out.rows {
                for (acc, x) in e_user.iter_mut().zip(out.row(j)) {
                    *acc += x;
                }
            }
            let inv = 1.0 / out.rows as f64;
            for x in &mut e_user {
                *x *= inv;
            }
            Ok((e_user, CrossCache { form, q, k, v, attn }))
        }
    }
}

/// Gradients of [`target_cross_attention`]: (dr_star, d_e_item, dwq, dwk, dwv).
pub fn target_cross_attention_backward(
    r_star: &Matrix,
    e_item: &[f64],
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    cache: &CrossCache,
    d_e_user: &[f64],
) -> Result<(Matrix, Vec<f64>, Matrix, Matrix, Matrix), FusionError> {
    let item = Matrix::from_rows(&[e_item.to_vec()]);
    match cache.form {
        CrossAttentionForm::ItemAsQuery => {
            let dy = Matrix::from_rows(&[d_e_user.to_vec()]);
            let (dq, dk, dv) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.attn, &dy)?;
            let dwq = item.matmul_at(&dq)?;
            let dwk = r_star.matmul_at(&dk)?;
            let dwv = r_star.matmul_at(&dv)?;
            let d_item = dq.matmul_bt(wq)?;
            let mut dr_star = dk.matmul_bt(wk)?;
            dr_star.add_assign(&dv.matmul_bt(wv)?);
            Ok((dr_star, d_item.row(0).to_vec(), dwq, dwk, dwv))
        }
        CrossAttentionForm::RowsAsQueries => {
            // Mean pool spreads the upstream gradient evenly over rows.
            let inv = 1.0 / r_star.rows as f64;
            let mut dy = Matrix::zeros(r_star.rows, d_e_user.len());
            for j in 0..r_star.rows {
                for (slot, g) in dy.row_mut(j).iter_mut().zip(d_e_user) {
                    *slot = g * inv;
                }
            }
            let (dq, dk, dv) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.attn, &dy)?;
            let dwq = r_star.matmul_at(&dq)?;
            let dwk = item.matmul_at(&dk)?;
            let dwv = item.matmul_at(&dv)?;
            let dr_star = dq.matmul_bt(wq)?;
            let mut d_item = dk.matmul_bt(wk)?;
            d_item.add_assign(&dv.matmul_bt(wv)?);
            Ok((dr_star, d_item.row(0).to_vec(), dwq, dwk, dwv))
        }
    }
}

/// Ask the backend what the item is about and embed the answer. The gateway
/// caches by rendered prompt, so repeat items cost one call total.
pub fn item_knowledge_vector(
    item: &Interaction,
    gateway: &Gateway,
    encoder: &dyn TextEncoder,
    limits: &PromptLimits,
) -> Result<Vec<f64>, FusionError> {
    let ctx = PromptContext { item: Some(item), ..Default::default() };
    let rendered = render_prompt(PromptKind::Item, &ctx, limits)?;
    let req = GenRequest {
        kind: PromptKind::Item,
        rendered,
        n: 1,
        temperature: 0.0,
        seed: 0,
        max_tokens: 128,
    };
    let texts = gateway.sample_candidates(&req)?;
    Ok(encoder.encode(&texts[0]))
}

/// The two projection triples of the fusion stack, addressed by name inside
/// a shared [`ParamStore`] so the click head can train in the same store.
#[derive(Debug, Clone, Copy)]
pub struct FusionStack {
    pub d: usize,
    pub cross_form: CrossAttentionForm,
}

const SA_Q: &str = "fusion.sa.wq";
const SA_K: &str = "fusion.sa.wk";
const SA_V: &str = "fusion.sa.wv";
const X_Q: &str = "fusion.x.wq";
const X_K: &str = "fusion.x.wk";
const X_V: &str = "fusion.x.wv";

pub struct FuseCache {
    r: Matrix,
    msa: MsaCache,
    r_star: Matrix,
    e_item: Vec<f64>,
    cross: CrossCache,
}

impl FusionStack {
    pub fn new(d: usize, cross_form: CrossAttentionForm) -> Self {
        assert!(d > 0, "fusion dim must be positive");
        Self { d, cross_form }
    }

    pub fn param_names(&self) -> [&'static str; 6] {
        [SA_Q, SA_K, SA_V, X_Q, X_K, X_V]
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for name in self.param_names() {
            store.insert(name, Matrix::glorot(self.d, self.d, rng));
        }
    }

    /// r (T x d, already weighted and position-coded) + e_item -> e_user.
    pub fn forward(
        &self,
        store: &ParamStore,
        r: &Matrix,
        e_item: &[f64],
    ) -> Result<(Vec<f64>, FuseCache), FusionError> {
        if r.cols != self.d {
            return Err(FusionError::DimMismatch { expected: self.d, got: r.cols });
        }
        let (r_star, msa) =
            masked_self_attention(r, store.get(SA_Q), store.get(SA_K), store.get(SA_V))?;
        let (e_user, cross) = target_cross_attention(
            &r_star,
            e_item,
            store.get(X_Q),
            store.get(X_K),
            store.get(X_V),
            self.cross_form,
        )?;
        let cache = FuseCache {
            r: r.clone(),
            msa,
            r_star,
            e_item: e_item.to_vec(),
            cross,
        };
        Ok((e_user, cache))
    }

    /// Accumulates parameter gradients into `store`; returns (dr, d_e_item).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &FuseCache,
        d_e_user: &[f64],
    ) -> Result<(Matrix, Vec<f64>), FusionError> {
        let (dr_star, d_e_item, dxq, dxk, dxv) = target_cross_attention_backward(
            &cache.r_star,
            &cache.e_item,
            store.get(X_Q),
            store.get(X_K),
            store.get(X_V),
            &cache.cross,
            d_e_user,
        )?;
        let (dr, dsq, dsk, dsv) = masked_self_attention_backward(
            &cache.r,
            store.get(SA_Q),
            store.get(SA_K),
            store.get(SA_V),
            &cache.msa,
            &dr_star,
        )?;
        store.accumulate(X_Q, &dxq);
        store.accumulate(X_K, &dxk);
        store.accumulate(X_V, &dxv);
        store.accumulate(SA_Q, &dsq);
        store.accumulate(SA_K, &dsk);
        store.accumulate(SA_V, &dsv);
        Ok((dr, d_e_item))
    }
}

/// A user's fused representation against one target item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedUserVector {
    pub user_id: String,
    pub e_user: Vec<f64>,
    pub e_item: Vec<f64>,
}

/// End-to-end fusion for one (user trajectory, target item) pair.
pub fn fuse(
    user_id: &str,
    interests: &[String],
    scores: &[f64],
    item: &Interaction,
    stack: &FusionStack,
    store: &ParamStore,
    gateway: &Gateway,
    encoder: &dyn TextEncoder,
    limits: &PromptLimits,
) -> Result<FusedUserVector, FusionError> {
    let seq = InterestSequenceEmbedding::build(user_id, interests, scores, encoder, stack.d)?;
    let r = seq.weighted()?;
    let e_item = item_knowledge_vector(item, gateway, encoder, limits)?;
    let (e_user, _) = stack.forward(store, &r, &e_item)?;
    if e_user.iter().chain(&e_item).any(|x| !x.is_finite()) {
        return Err(FusionError::NonFinite);
    }
    Ok(FusedUserVector { user_id: user_id.to_string(), e_user, e_item })
}
