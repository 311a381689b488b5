//! Ordinal change classification: losses with analytic gradients, a small
//! MLP (plain or Siamese), ensembling rules, metrics and a synthetic data
//! generator.

pub mod confusion;
pub mod datagen;
pub mod ensemble;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod types;

pub use confusion::{confusion_from_predictions, ConfusionMatrix};
pub use error::{Error, NonFiniteLoss, Result};
pub use types::{
    cdf, softmax, BscanRecord, ChangeClass, ClassLabel, LogitVector, PairLabel, PairRecord, ProbVector, RecordKey,
    Task,
};
