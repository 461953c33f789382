//! Interaction ingestion and behavior chunking.
//!
//! A user's full history is cut into consecutive fixed-length chunks in
//! timestamp order. Chunk indices are 1-based and contiguous; the final
//! chunk keeps the remainder, so concatenating a user's chunks always
//! reproduces the sorted history exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("chunk length must be at least 1")]
    InvalidChunkLen,
    #[error("split ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
}

/// One logged user-item event. `label` is not part of the wire format in
/// either direction; it is derived from the configured [`LabelPolicy`] at
/// ingestion, and again by any reader of files that embed these records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
    pub rating: f64,
    pub ts: i64,
    #[serde(default, skip_serializing)]
    pub label: bool,
}

/// How a raw rating becomes a binary label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Positive when rating is strictly above the value (ratings-style data).
    ThresholdAbove { value: f64 },
    /// Positive only when rating equals the value exactly (five-star-only data).
    ExactEqual { value: f64 },
}

impl LabelPolicy {
    pub fn label(&self, rating: f64) -> bool {
        match self {
            LabelPolicy::ThresholdAbove { value } => rating > *value,
            LabelPolicy::ExactEqual { value } => rating == *value,
        }
    }
}

/// A user's complete history, sorted by (ts, item_id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub items: Vec<Interaction>,
}

/// One fixed-length window of a user's history. `chunk_index` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorChunk {
    pub user_id: String,
    pub chunk_index: usize,
    pub items: Vec<Interaction>,
}

/// All chunks of one user, indices contiguous from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSequence {
    pub user_id: String,
    pub chunks: Vec<BehaviorChunk>,
}

/// Reads interactions from a JSONL file, labels them, and groups them into
/// per-user histories sorted by (ts, item_id). Users are returned in id
/// order. An empty file is an empty result, not an error; a malformed line
/// (bad JSON, empty title, non-finite rating) is an error carrying the
/// 1-based line number.
pub fn ingest(path: &Path, policy: &LabelPolicy) -> Result<Vec<UserHistory>, BehaviorError> {
    let file = std::fs::File::open(path).map_err(|source| BehaviorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut by_user: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| BehaviorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: Interaction = serde_json::from_str(&line)
            .map_err(|e| BehaviorError::MalformedRecord { line: line_no, msg: e.to_string() })?;
        if rec.title.is_empty() {
            return Err(BehaviorError::MalformedRecord {
                line: line_no,
                msg: "empty title".to_string(),
            });
        }
        if !rec.rating.is_finite() {
            return Err(BehaviorError::MalformedRecord {
                line: line_no,
                msg: "non-finite rating".to_string(),
            });
        }
        rec.label = policy.label(rec.rating);
        by_user.entry(rec.user_id.clone()).or_default().push(rec);
    }
    Ok(by_user
        .into_iter()
        .map(|(user_id, mut items)| {
            items.sort_by(|a, b| (a.ts, &a.item_id).cmp(&(b.ts, &b.item_id)));
            UserHistory { user_id, items }
        })
        .collect())
}

/// Drops users with fewer than `floor` interactions (review-count floor).
pub fn filter_min_interactions(histories: Vec<UserHistory>, floor: usize) -> Vec<UserHistory> {
    histories.into_iter().filter(|h| h.items.len() >= floor).collect()
}

/// Cuts a history into consecutive windows of exactly `l` items; the final
/// window keeps the remainder. The chunk count is ceil(|items| / l).
pub fn chunk_history(history: &UserHistory, l: usize) -> Result<ChunkSequence, BehaviorError> {
    if l == 0 {
        return Err(BehaviorError::InvalidChunkLen);
    }
    let chunks = history
        .items
        .chunks(l)
        .enumerate()
        .map(|(i, window)| BehaviorChunk {
            user_id: history.user_id.clone(),
            chunk_index: i + 1,
            items: window.to_vec(),
        })
        .collect();
    Ok(ChunkSequence { user_id: history.user_id.clone(), chunks })
}

/// Splits interactions at the global-timestamp quantile `ratio`: the first
/// floor(ratio * n) interactions in (ts, user_id, item_id) order are train,
/// the rest test. Every train timestamp is <= every test timestamp.
pub fn time_split(
    interactions: &[Interaction],
    ratio: f64,
) -> Result<(Vec<Interaction>, Vec<Interaction>), BehaviorError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(BehaviorError::InvalidRatio(ratio));
    }
    let mut sorted: Vec<Interaction> = interactions.to_vec();
    sorted.sort_by(|a, b| (a.ts, &a.user_id, &a.item_id).cmp(&(b.ts, &b.user_id, &b.item_id)));
    // The epsilon keeps exact products like 0.3 * 10 from truncating to 2.
    let cut = ((sorted.len() as f64) * ratio + 1e-9).floor() as usize;
    let cut = cut.min(sorted.len());
    let test = sorted.split_off(cut);
    Ok((sorted, test))
}

// Fixture builders shared by tests across the crate: hand-rolled chunks with
// known category attributes and like/dislike labels.
#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use std::collections::BTreeMap;

    pub(crate) fn item_with(cat: &str, title: &str, label: bool) -> Interaction {
        let mut attrs = BTreeMap::new();
        attrs.insert("category".to_string(), cat.to_string());
        Interaction {
            user_id: "u".into(),
            item_id: title.to_string(),
            title: title.to_string(),
            attrs,
            rating: if label { 5.0 } else { 1.0 },
            ts: 0,
            label,
        }
    }

    pub(crate) fn chunk_of(index: usize, cats: &[(&str, bool)]) -> BehaviorChunk {
        BehaviorChunk {
            user_id: "u".into(),
            chunk_index: index,
            items: cats
                .iter()
                .enumerate()
                .map(|(i, (c, l))| {
                    let mut item = item_with(c, &format!("item_{i:04}"), *l);
                    item.ts = i as i64;
                    item
                })
                .collect(),
        }
    }

    /// `n_pos` liked cat_01 items followed by `n_neg` disliked cat_02 items.
    pub(crate) fn liked_disliked_chunk(index: usize, n_pos: usize, n_neg: usize) -> BehaviorChunk {
        let mut items = Vec::new();
        for i in 0..n_pos {
            let mut item = item_with("cat_01", &format!("pos_{i:02}"), true);
            item.ts = i as i64;
            items.push(item);
        }
        for i in 0..n_neg {
            let mut item = item_with("cat_02", &format!("neg_{i:02}"), false);
            item.ts = (n_pos + i) as i64;
            items.push(item);
        }
        BehaviorChunk { user_id: "u".into(), chunk_index: index, items }
    }
}
