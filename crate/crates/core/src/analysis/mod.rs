//! Post-hoc analysis of finished runs: loss-series coupling (Pearson and
//! binned mutual information), PCA projections of the latent states and the
//! CSV/SVG figures built on them.

mod export;
mod pca;
mod stats;
mod svg;

pub use export::{
    export_figures, histogram_unit, trajectory_correlation, write_atomic, write_correlation_csv, write_flatness_csv,
    CorrelationRow, FlatnessRow, SCORE_NAMES,
};
pub use pca::{pca_project, LatentProjection};
pub use stats::{
    bin_count, binned_entropy, loss_correlation, mutual_information, mutual_information_binned, pearson,
    pearson_p_value, shuffled_mi_baseline, train_val_correlation, LossCorrelationReport, Pearson, TrainValCorrelation,
};

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("need at least {needed} points, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("correlation undefined: a series is constant")]
    UndefinedCorrelation,
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("nothing to analyze: empty {0}")]
    Empty(String),
    #[error("writing outputs: {0}")]
    Io(String),
}

impl From<DiffError> for AnalysisError {
    fn from(e: DiffError) -> Self {
        AnalysisError::Misaligned(e.to_string())
    }
}
