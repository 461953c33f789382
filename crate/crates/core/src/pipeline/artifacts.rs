//! Artifact names, line formats and IO.
//!
//! Every artifact is either JSONL (one record per line, no trailing blank
//! lines) or a single pretty-printed JSON document. Writes go through the
//! temp-file-then-rename path so a reader never sees a partial file.
//!
//! Interaction records carry no label on the wire; every reader re-derives
//! labels from the configured policy, which keeps the files policy-neutral.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ctr::CtrSample;
use crate::persist::write_atomic;

use super::PipelineError;

pub const INTERACTIONS: &str = "interactions.jsonl";
pub const GROUND_TRUTH: &str = "ground_truth.jsonl";
pub const CATALOG: &str = "catalog.jsonl";
pub const CHUNKS: &str = "chunks.jsonl";
pub const CASCADE: &str = "cascade.jsonl";
pub const RATING_TRAIN: &str = "rating_train.jsonl";
pub const SRM: &str = "srm.json";
pub const PRM: &str = "prm.json";
pub const INTERESTS: &str = "interests.jsonl";
pub const CTR_SAMPLES: &str = "ctr_samples.jsonl";
pub const FUSED: &str = "fused.jsonl";
pub const FUSION_PARAMS: &str = "fusion.json";
pub const CTR_MODEL: &str = "ctr_model.json";
pub const METRICS: &str = "metrics.json";
pub const ABLATION: &str = "ablation_report.json";

/// One ground_truth.jsonl line: the planted category distribution of one
/// user chunk (1-based index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub user_id: String,
    pub chunk_index: usize,
    pub dist: Vec<f64>,
}

/// One cascade.jsonl line: the single interest the plain sequential pass
/// kept for one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeRecord {
    pub user_id: String,
    pub chunk_index: usize,
    pub interest_text: String,
}

/// One fused.jsonl line: the frozen fused vectors for one (user, item) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRecord {
    pub user_id: String,
    pub item_id: String,
    pub e_user: Vec<f64>,
    pub e_item: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One ctr_samples.jsonl line: a click sample plus which side of the time
/// split it fell on. Side vectors are never stored here; the training stages
/// attach them from fused.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtrSampleRecord {
    pub split: Split,
    #[serde(flatten)]
    pub sample: CtrSample,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).map_err(|e| PipelineError::BadJson {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| PipelineError::BadRecord {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut buf = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::BadJson {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    buf.push(b'\n');
    write_atomic(path, &buf)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = std::fs::read(path)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::BadJson {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}
