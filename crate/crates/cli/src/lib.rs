//! Orchestration for the embryo synthesis workflow: ingest a corpus, train
//! adversarial and diffusion generators per stage, pick checkpoints by FID,
//! generate synthetic sets, sweep classifier training mixes, report, and
//! hand an evaluation pool to the rating service.
//!
//! The `embryogen` binary is a thin shell over [`Pipeline`]; everything it
//! does is reachable from here.

pub mod config;
pub mod pipeline;

pub use config::{load_config, parse_config, ConfigError, PipelineConfig};
pub use pipeline::{
    par_map, parse_stages, Marker, Pipeline, PipelineError, PipelineResult, RunManifest, RunSummary, StageName,
    StageOutcome, StageStatus, MARKER_FILE, NORMALIZED_CONFIG, RUN_MANIFEST, SANITY_BAND,
};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
struct Guide;
