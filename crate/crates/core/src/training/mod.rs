//! Optimization, the four training modes, dev-set evaluation, checkpoint
//! selection and persistence.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod train;

pub use adam::{adam_step, AdamState, ParamSlot};
pub use checkpoint::{Checkpoint, ManifestEntry, FORMAT_VERSION};
pub use config::{LearningRates, ModelConfig, TrainConfig};
pub use eval::{accuracy, divergence_diagnostic, evaluate, selection_score, DevSets, EvalReport};
pub use model::Model;
pub use train::{train, HistoryEntry, StepLosses, TrainData, TrainOutcome};
