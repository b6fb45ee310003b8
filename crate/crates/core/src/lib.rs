//! Frequency-regularized generative likelihoods for out-of-distribution
//! detection: high-frequency extraction, small VAE / flow / autoregressive
//! models on the augmented input, PNG-based input complexity and the scores
//! and metrics built from them.

pub mod complexity;
pub mod data;
pub mod frequency;
pub mod models;
pub mod scoring;
pub mod tensor;

#[cfg(any(test, feature = "testing"))]
pub mod testing;

pub use complexity::ComplexityScore;
pub use data::{Dataset, Image, Manifest, Split};
pub use frequency::{FrequencyConfig, Method};
pub use models::{Family, FittedModel, InputSpec, ModelConfig, QuantImage};
pub use scoring::{EvalReport, Label, ScoreOptions, ScoreRecord, Scorer};

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] tensor::checkpoint::CheckpointError),
    #[error(transparent)]
    Frequency(#[from] frequency::FrequencyError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Scoring(#[from] scoring::ScoringError),
}
