//! Controlled differential equations `dh = f(h) · do` driven by a
//! piecewise-linear interpolant of irregular observations.
//!
//! Integration is always batched: every trajectory gets a fixed-step
//! schedule ([`StepPlan`]) and the schedules are aligned by step index
//! ([`BatchPlan`]), so one field evaluation covers the whole batch. The
//! multistep history of the implicit solver restarts at every knot and
//! output time, which makes a split at a knot bitwise-equivalent to one call.

mod path;
mod solver;

pub use path::ControlPath;
pub use solver::{
    implicit_adams_step, integrate, integrate_batch, integrate_values, rk4_step,
    rk4_step_on_path, AdamsOrder, BatchPlan, BatchSolution, FnField, HiddenTrajectory,
    SolverConfig, SolverKind, SolverStats, StepPlan, TapeTrajectory, VectorField,
};

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CdeError {
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("time {t} outside path domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("non-finite state at t={t} (stage {stage})")]
    Divergence { t: f64, stage: usize },
    #[error("fixed-point iteration did not converge at t={t} after {iterations} iterations (last increment {residual:.3e})")]
    Stiffness {
        t: f64,
        iterations: usize,
        residual: f64,
    },
    #[error("solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
