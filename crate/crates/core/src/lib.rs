//! Weakly supervised self-distillation for image-based profiling.
//!
//! The pipeline: synthesize or ingest multi-channel microscopy fields,
//! correct and normalize them, train a ViT student/teacher pair where the
//! student's local crops come from a different image sharing the query's
//! weak label, post-process per-field embeddings into treatment profiles,
//! and score mechanism-of-action transfer with nearest-neighbor metrics
//! that exclude same-compound (and optionally same-batch) candidates.

pub mod backbone;
pub mod config;
pub mod distillation;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod imgio;
pub mod manifest;
pub mod normalization;
pub mod pipeline;
pub mod sampling;
pub mod seeding;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use manifest::ImageRecord;
