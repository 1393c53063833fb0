//! Maximum-entropy inverse reinforcement learning for the Balloon Analogue
//! Risk Task.
//!
//! - [`task`]: the exact tabular task, analytics, and a seeded simulator
//! - [`trajectory`]: trial records, JSONL I/O, statistics, splits
//! - [`features`]: the 11 history-dependent state features
//! - [`irl`]: soft backward / forward passes, gradient, trainer, likelihood
//! - [`agents`]: synthetic subjects for validation
//! - [`experiment`]: the pooled / group-split protocol and its report bundle

pub mod agents;
pub mod error;
pub mod experiment;
pub mod features;
pub mod irl;
pub mod task;
pub mod trajectory;

pub use error::{Error, Result};
pub use features::{FeatureMatrix, FeatureOptions, FeatureSemantics, N_FEATURES};
pub use irl::{Demonstration, LogLikelihood, PolicyTable, ThetaWeights, TrainConfig, TrainReport};
pub use task::{BartConfig, OutcomeKind};
pub use trajectory::{Session, TrialRecord};
