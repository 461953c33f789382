//! Stage-oriented pipeline driver.
//!
//! One config file describes a whole run; each stage reads the artifacts of
//! its upstream stages from the run directory and publishes its own. Stages
//! are individually re-runnable and skip themselves when their outputs
//! already exist (unless forced), so a crashed run resumes where it stopped.
//! Everything a downstream stage needs lives in the declared artifact files;
//! there is no hidden state besides the optional response cache.

mod artifacts;
mod config;
mod stages;

pub use artifacts::{
    read_json, read_jsonl, write_json, write_jsonl, CascadeRecord, CtrSampleRecord, FusedRecord,
    GroundTruthRecord, Split, ABLATION, CASCADE, CATALOG, CHUNKS, CTR_MODEL, CTR_SAMPLES, FUSED,
    FUSION_PARAMS, GROUND_TRUTH, INTERACTIONS, INTERESTS, METRICS, PRM, RATING_TRAIN, SRM,
};
pub use config::{
    ChunkSection, ConfigError, CtrSection, DataSection, EncoderSection, FusionSection,
    PipelineConfig, PromptSection, RatingSection, RunSection, SearchSection, SourceKind,
};
pub use stages::{run_stage, Stage, StageContext, StageOutcome};

use thiserror::Error;

use crate::behavior::BehaviorError;
use crate::ctr::CtrError;
use crate::fusion::FusionError;
use crate::gateway::GatewayError;
use crate::rating::RatingError;
use crate::synth::SynthError;
use crate::tree::TreeError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing upstream artifact {artifact}: run the {producer} stage first")]
    MissingUpstream { artifact: String, producer: &'static str },
    #[error("io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad record in {path} line {line}: {msg}")]
    BadRecord { path: String, line: usize, msg: String },
    #[error("bad json in {path}: {msg}")]
    BadJson { path: String, msg: String },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Ctr(#[from] CtrError),
}

impl PipelineError {
    /// Process exit code the CLI maps this error to: 2 config, 3 missing
    /// upstream artifact, 4 backend or transport, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingUpstream { .. } => 3,
            PipelineError::Gateway(_) => 4,
            PipelineError::Tree(TreeError::Expand { .. }) => 4,
            PipelineError::Rating(RatingError::Gateway(_)) => 4,
            PipelineError::Fusion(FusionError::Gateway(_)) => 4,
            PipelineError::Ctr(CtrError::Fusion(FusionError::Gateway(_))) => 4,
            _ => 1,
        }
    }
}
