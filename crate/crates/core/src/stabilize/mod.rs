//! Training stabilizers (global-norm gradient clipping, the implicit Adams
//! solver, stiffness regularization) and the flatness metrics used to score
//! a training curve.

mod clip;
mod flatness;
mod stiffness;

pub use clip::{clip_gradients, clip_vector, ClipReport};
pub use flatness::{flatness, FlatnessReport};
pub use stiffness::{stiffness_penalty, stiffness_score, JacobianField, StiffnessScore, StiffnessStats};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilizeError {
    #[error("flatness needs at least 2 epochs, got {0}")]
    TooShort(usize),
    #[error("non-finite loss at epoch {0}")]
    NonFinite(usize),
    #[error("invalid stabilizer configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilizerMethod {
    None,
    GradClip,
    ImplicitAdams,
    StiffnessReg,
}

impl StabilizerMethod {
    pub const ALL: [StabilizerMethod; 4] = [
        StabilizerMethod::None,
        StabilizerMethod::GradClip,
        StabilizerMethod::ImplicitAdams,
        StabilizerMethod::StiffnessReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StabilizerMethod::None => "none",
            StabilizerMethod::GradClip => "grad_clip",
            StabilizerMethod::ImplicitAdams => "implicit_adams",
            StabilizerMethod::StiffnessReg => "stiffness_reg",
        }
    }
}

impl std::str::FromStr for StabilizerMethod {
    type Err = StabilizeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StabilizerMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| StabilizeError::Config(format!("unknown stabilizer '{s}'")))
    }
}

impl std::fmt::Display for StabilizerMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const CLIP_NORM_GRID: [f64; 4] = [0.1, 0.5, 1.0, 1.5];
pub const LAMBDA_REG_GRID: [f64; 3] = [0.005, 0.01, 0.015];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilizerConfig {
    pub method: StabilizerMethod,
    pub clip_norm: f64,
    pub lambda_reg: f64,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        StabilizerConfig {
            method: StabilizerMethod::None,
            clip_norm: 1.0,
            lambda_reg: 0.01,
        }
    }
}

impl StabilizerConfig {
    pub fn validate(&self) -> Result<(), StabilizeError> {
        if !(self.clip_norm > 0.0) {
            return Err(StabilizeError::Config("clip_norm must be positive".into()));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(StabilizeError::Config("lambda_reg must be nonnegative".into()));
        }
        Ok(())
    }

    /// Settings outside the tuning grids, worth a log line.
    pub fn off_grid(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.method == StabilizerMethod::GradClip && !CLIP_NORM_GRID.contains(&self.clip_norm) {
            out.push(format!("clip_norm {} is outside {:?}", self.clip_norm, CLIP_NORM_GRID));
        }
        if self.method == StabilizerMethod::StiffnessReg && !LAMBDA_REG_GRID.contains(&self.lambda_reg) {
            out.push(format!("lambda_reg {} is outside {:?}", self.lambda_reg, LAMBDA_REG_GRID));
        }
        out
    }
}
