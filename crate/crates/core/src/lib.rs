//! Weakly supervised video anomaly detection with frozen vision-language
//! features: a temporal adapter, a binary classification branch and a
//! class-alignment branch with learnable and visual prompts.

pub mod adapter;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod synthetic;
pub mod text;
pub mod train;

pub use data::{Dataset, DetectionSegment, FeatureSequence, GtSegment, LabelVocabulary, Video, VideoAnnotation};
pub use error::{Error, Result};
pub use inference::InferencePath;
pub use model::{ModelConfig, ModelOutput, VadClip};
pub use train::{EvaluationReport, RunConfig, Trainer};
