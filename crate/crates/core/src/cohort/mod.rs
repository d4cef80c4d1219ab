//! Sepsis-like ICU trajectories: synthetic generation, the 5×5 dosage action
//! grid, terminal rewards, stratified splits and the CSV exchange format.
//!
//! The generator stands in for a credentialed EHR extract. It keeps the
//! schema (33 dense features, 25 actions, 4 h cadence over 72 h, three bounded
//! acuity scores, ~9.2% mortality) so everything downstream runs unchanged on
//! a real cohort written in the same CSV layout.

mod actions;
mod csv_io;
mod generate;
mod split;

pub use actions::{bin_action, fluid_bin, split_action, vaso_bin, FLUID_EDGES, N_BINS, VASO_EDGES};
pub use csv_io::{read_cohort_csv, write_cohort_csv, CSV_HEADER};
pub use generate::{generate_cohort, generate_cohort_detailed, CohortParams, GeneratedCohort};
pub use split::{split_cohort, CohortSplit, SplitRatios};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cde::{CdeError, ControlPath};
use crate::diffcore::Array;

pub const N_FEATURES: usize = 33;
pub const N_ACTIONS: usize = 25;
pub const MAX_STEPS: usize = 18;

pub const SOFA_RANGE: (f64, f64) = (0.0, 24.0);
pub const SAPSII_RANGE: (f64, f64) = (0.0, 163.0);
pub const OASIS_RANGE: (f64, f64) = (10.0, 83.0);

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("{}: column '{column}': {message}", row.map(|r| format!("row {r}")).unwrap_or_else(|| "input".into()))]
    Ingestion {
        row: Option<usize>,
        column: String,
        message: String,
    },
    #[error("header mismatch: {0}")]
    Schema(String),
    #[error("invalid cohort parameters: {0}")]
    Params(String),
    #[error("cannot split cohort: {0}")]
    Split(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Survived,
    Died,
}

impl Outcome {
    /// `+1` on survival, `-1` on death.
    pub fn reward(self) -> f64 {
        match self {
            Outcome::Survived => 1.0,
            Outcome::Died => -1.0,
        }
    }

    pub fn died(self) -> bool {
        self == Outcome::Died
    }
}

/// Per-step acuity scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acuity {
    pub sofa: f64,
    pub sapsii: f64,
    pub oasis: f64,
}

impl Acuity {
    pub fn as_array(&self) -> [f64; 3] {
        [self.sofa, self.sapsii, self.oasis]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub patient_id: u64,
    /// Hours since admission, strictly increasing.
    pub times: Vec<f64>,
    /// `K×33`
    pub observations: Array,
    pub actions: Vec<usize>,
    pub acuity: Vec<Acuity>,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Zero everywhere except the terminal step.
    pub fn rewards(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.len()];
        if let Some(last) = r.last_mut() {
            *last = self.outcome.reward();
        }
        r
    }

    /// Undiscounted return; equals the terminal reward.
    pub fn ret(&self) -> f64 {
        self.outcome.reward()
    }

    pub fn control_path(&self) -> Result<ControlPath, CdeError> {
        ControlPath::new(self.times.clone(), self.observations.clone())
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |column: &str, message: String| CohortError::Ingestion {
            row: None,
            column: column.to_string(),
            message: format!("patient {}: {message}", self.patient_id),
        };
        let k = self.len();
        if !(2..=MAX_STEPS).contains(&k) {
            return Err(bad("t_hours", format!("{k} steps, expected 2..={MAX_STEPS}")));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(bad("t_hours", "times not strictly increasing".into()));
        }
        if self.observations.rows() != k || self.observations.cols() != N_FEATURES {
            return Err(bad("f0", "observation block has the wrong shape".into()));
        }
        if !self.observations.all_finite() {
            return Err(bad("f0", "non-finite feature".into()));
        }
        if self.actions.len() != k || self.acuity.len() != k {
            return Err(bad("action", "per-step columns have different lengths".into()));
        }
        if let Some(a) = self.actions.iter().find(|&&a| a >= N_ACTIONS) {
            return Err(bad("action", format!("action {a} outside [0, 24]")));
        }
        for a in &self.acuity {
            for (v, (lo, hi), name) in [
                (a.sofa, SOFA_RANGE, "sofa"),
                (a.sapsii, SAPSII_RANGE, "sapsii"),
                (a.oasis, OASIS_RANGE, "oasis"),
            ] {
                if !(lo..=hi).contains(&v) {
                    return Err(bad(name, format!("{v} outside [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }
}

/// Fraction of trajectories that end in death.
pub fn mortality_rate(trajectories: &[Trajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    trajectories.iter().filter(|t| t.outcome.died()).count() as f64 / trajectories.len() as f64
}
