//! Unsupervised audio-visual highlight detection on clip-level features.
//!
//! The pipeline groups training videos into pseudo-categories, scores every
//! clip by how often its audio and visual features recur across the videos
//! of its category, trains an attention network on the top-scoring clips,
//! and evaluates the resulting rankings.

pub mod ablation;
pub mod categories;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pseudo;
pub mod rng;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use model::{HighlightModel, ModelConfig, Variant};
pub use pipeline::{PipelineSettings, RunConfig, Stage, StageError};
pub use store::{Dataset, FeatureMatrix, Split, VideoRecord};
