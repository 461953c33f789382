//! Lifelong user-behavior modeling toolkit.
//!
//! The pipeline turns long interaction histories into compact, time-aware
//! user representations for click-through-rate models:
//!
//! 1. histories are cut into fixed-length behavior chunks ([`behavior`]),
//! 2. an LLM backend extracts one interest summary per chunk, cascading the
//!    previous summary into the next prompt ([`gateway`]),
//! 3. two small raters learn to score interest quality from AUC-labeled
//!    transitions ([`rating`]),
//! 4. a per-layer best-of-N tree search re-extracts interests guided by those
//!    raters ([`tree`]),
//! 5. the selected interest path is fused into one user vector with
//!    score-weighted, causally masked attention ([`fusion`]),
//! 6. a CTR harness measures the end effect against ablations ([`ctr`]).
//!
//! Everything is deterministic given the seeds in the pipeline config; the
//! bundled mock backends make the whole system runnable offline.

pub mod behavior;
pub mod ctr;
pub mod encoder;
pub mod fusion;
pub mod gateway;
mod persist;
pub mod pipeline;
pub mod rating;
pub mod synth;
pub mod tree;
pub mod nn;
