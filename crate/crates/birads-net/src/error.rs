//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the pipeline.
///
/// Variants are grouped so a caller (the CLI in particular) can distinguish
/// data/validation problems from runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A BI-RADS category with no numeric likelihood of malignancy.
    #[error("no numeric likelihood defined for BI-RADS category {0}")]
    NoLikelihood(crate::lexicon::BiradsCategory),

    /// Ground-truth labels that contradict the BI-RADS vocabulary rules.
    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    /// The manifest file itself is malformed (header, encoding, emptiness).
    #[error("manifest schema error: {0}")]
    ManifestSchema(String),

    /// One manifest row failed validation.
    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    /// Cross-validation plan construction failed.
    #[error("fold plan: {0}")]
    FoldPlan(String),

    /// Image decoding or pixel-geometry failure.
    #[error("image error: {0}")]
    Image(String),

    /// Tensor shape disagreement between caller and callee.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Checkpoint or weight-archive problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss component.
    #[error("non-finite loss in component `{component}` at epoch {epoch}")]
    NonFiniteLoss { component: String, epoch: usize },

    /// Configuration file or value problems.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input data rather than runtime failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::NoLikelihood(_)
                | Error::InvalidLabels(_)
                | Error::ManifestSchema(_)
                | Error::ManifestRow { .. }
                | Error::FoldPlan(_)
                | Error::Image(_)
                | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
