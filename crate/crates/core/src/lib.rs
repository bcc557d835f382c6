//! Per-image counting-confidence factors, a polynomial confidence model and a
//! hypothesis-driven sensitivity harness for trap-image pest counting.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod filter;
pub mod image_metrics;
pub mod niqe;
pub mod pipeline;
pub mod regression;
pub mod scene;
pub mod sensitivity;
pub mod special;
pub mod stats;
pub mod synth;
pub mod uniformity;

pub use data::{
    BoundingBox, ConditionMetadata, DensityClass, Detection, Factor, FactorVector, GroundTruthBox, ImageRecord,
    Phase, StirSpeed, TIndex,
};
pub use config::PipelineConfig;
pub use error::{Error, ErrorClass, Result};
