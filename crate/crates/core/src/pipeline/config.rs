//! Run configuration.
//!
//! One TOML file, one section per module, every field defaulted: an empty
//! file is a complete, valid configuration. The effective config (defaults
//! filled in) serializes back to TOML and re-parses to an equal value, so a
//! printed echo is itself a usable config file. All randomness downstream
//! flows from the named seeds here; nothing reads the clock or OS entropy.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::LabelPolicy;
use crate::fusion::CrossAttentionForm;
use crate::gateway::{BackendDescriptor, BackendKind};
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    // toml's Display carries line/column spans.
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Generate interactions from the planted-drift simulator.
    Synth,
    /// Read interactions from `data.path`.
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out_dir: PathBuf::from("runs/default"), workers: 1 }
    }
}

// `label` stays last: TOML emits values before tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceKind,
    /// Input interactions file; only read when `source = "jsonl"`.
    pub path: String,
    /// Users below this interaction count are dropped before chunking.
    pub min_reviews: usize,
    /// Global time-quantile train fraction.
    pub split_ratio: f64,
    pub label: LabelPolicy,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: SourceKind::Synth,
            path: String::new(),
            min_reviews: 50,
            split_ratio: 0.9,
            label: LabelPolicy::ThresholdAbove { value: 3.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkSection {
    /// Chunk length L.
    pub l: usize,
}

impl Default for ChunkSection {
    fn default() -> Self {
        ChunkSection { l: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingSection {
    /// Per-class eval-set size drawn from the successor chunk.
    pub n_eval: usize,
    /// How many previous interests the continuity side sees (K).
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    /// 0 trains full-batch.
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for RatingSection {
    fn default() -> Self {
        RatingSection {
            n_eval: 6,
            k: 1,
            lr: 0.5,
            epochs: 200,
            batch: 0,
            hidden: vec![64, 32],
            seed: 29,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    /// Candidates generated per expanded node (best-of-N width).
    pub n_expand: usize,
    /// Continuity weight in the blended score.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection { n_expand: 10, alpha: 0.5, seed: 41 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// Text embedding dimension, shared by interests and item knowledge.
    pub d: usize,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { d: 64, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub cross_form: CrossAttentionForm,
    pub lr: f64,
    pub epochs: usize,
    /// 0 trains full-batch.
    pub batch: usize,
    pub seed: u64,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            cross_form: CrossAttentionForm::ItemAsQuery,
            lr: 0.01,
            epochs: 30,
            batch: 64,
            seed: 53,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtrSection {
    /// Id embedding width.
    pub d_id: usize,
    /// Recent-behavior window length.
    pub w: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    /// 0 trains full-batch.
    pub batch: usize,
    pub seed: u64,
    /// Training-set cap for the click trainers; 0 disables the cap.
    pub max_train_samples: usize,
    /// Adds the fusion-mechanism comparison rows to the ablation report.
    pub fusion_variants: bool,
    pub ablation_seed: u64,
}

impl Default for CtrSection {
    fn default() -> Self {
        CtrSection {
            d_id: 16,
            w: 10,
            hidden: vec![64, 32],
            lr: 0.01,
            epochs: 30,
            batch: 64,
            seed: 61,
            max_train_samples: 4000,
            fusion_variants: false,
            ablation_seed: 97,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    /// Hard character budget per rendered prompt.
    pub max_chars: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection { max_chars: 8000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub chunk: ChunkSection,
    pub rating: RatingSection,
    pub search: SearchSection,
    pub encoder: EncoderSection,
    pub fusion: FusionSection,
    pub ctr: CtrSection,
    pub backend: BackendDescriptor,
    pub prompt: PromptSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let cfg: PipelineConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every range violation, not just the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                bad.push(msg.to_string());
            }
        };
        check(self.run.workers >= 1, "run.workers must be at least 1");
        check(self.chunk.l >= 1, "chunk.l must be at least 1");
        check(
            self.data.split_ratio.is_finite()
                && self.data.split_ratio > 0.0
                && self.data.split_ratio < 1.0,
            "data.split_ratio must be inside (0, 1)",
        );
        check(
            self.data.source != SourceKind::Jsonl || !self.data.path.is_empty(),
            "data.path is required when data.source is \"jsonl\"",
        );
        check(self.rating.n_eval >= 1, "rating.n_eval must be at least 1");
        check(
            self.rating.lr.is_finite() && self.rating.lr >= 0.0,
            "rating.lr must be finite and non-negative",
        );
        check(self.search.n_expand >= 1, "search.n_expand must be at least 1");
        check(
            self.search.alpha.is_finite() && (0.0..=1.0).contains(&self.search.alpha),
            "search.alpha must be inside [0, 1]",
        );
        check(self.encoder.d >= 1, "encoder.d must be at least 1");
        check(
            self.fusion.lr.is_finite() && self.fusion.lr >= 0.0,
            "fusion.lr must be finite and non-negative",
        );
        check(self.ctr.d_id >= 1, "ctr.d_id must be at least 1");
        check(self.ctr.w >= 1, "ctr.w must be at least 1");
        check(
            self.ctr.lr.is_finite() && self.ctr.lr >= 0.0,
            "ctr.lr must be finite and non-negative",
        );
        check(self.prompt.max_chars >= 1, "prompt.max_chars must be at least 1");
        check(
            self.backend.kind != BackendKind::Http || self.backend.endpoint.is_some(),
            "backend.endpoint is required when backend.kind is \"http\"",
        );
        check(
            self.synth.noise.is_finite() && (0.0..0.5).contains(&self.synth.noise),
            "synth.noise must be inside [0, 0.5)",
        );
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(bad))
        }
    }

    /// The defaults-filled config as a TOML document. Round-trips: parsing
    /// the echo yields an equal config.
    pub fn effective_toml(&self) -> String {
        toml::to_string_pretty(self).expect("a validated config serializes")
    }
}
