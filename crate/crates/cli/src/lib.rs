//! Pipeline driver and report emitters on top of `mergecal-core`.
//!
//! Everything here is a pure function of (config, seed): stages write their
//! artifacts under an output directory and later stages read them back, so
//! each subcommand can also run standalone.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::{MergeMethod, MergeParams, ModelParams, PipelineConfig, TrainParams};
pub use manifest::{ArtifactRecord, PipelineManifest};
pub use pipeline::{run_pipeline, Stage};
