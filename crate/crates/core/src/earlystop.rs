//! Multi-criteria checkpoint selection.
//!
//! An epoch `e` is a stopping epoch when the validation loss is within `ε1` of
//! its running minimum, the training loss over the window `[e−p, e]` has a
//! relative spread of at most `ε2`, and the mean train acuity correlation has
//! reached `ρ_threshold`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopCriteria {
    pub eps1: f64,
    pub p: usize,
    pub eps2: f64,
    pub rho_threshold: f64,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self {
            eps1: 0.1,
            p: 30,
            eps2: 0.02,
            rho_threshold: 0.7,
        }
    }
}

pub const EPS1_GRID: [f64; 4] = [0.05, 0.1, 0.15, 0.2];
pub const P_GRID: [usize; 4] = [20, 30, 40, 50];
pub const EPS2_GRID: [f64; 4] = [0.02, 0.03, 0.04, 0.05];
pub const RHO_GRID: [f64; 4] = [0.6, 0.65, 0.7, 0.75];

impl StopCriteria {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eps1 >= 0.0 && self.eps1.is_finite()) {
            return Err(format!("eps1 must be a finite non-negative number, got {}", self.eps1));
        }
        if !(self.eps2 >= 0.0 && self.eps2.is_finite()) {
            return Err(format!("eps2 must be a finite non-negative number, got {}", self.eps2));
        }
        if self.p == 0 {
            return Err("p must be at least 1".into());
        }
        if !self.rho_threshold.is_finite() {
            return Err("rho_threshold must be finite".into());
        }
        Ok(())
    }

    /// Names of fields outside the tuning grids.
    pub fn off_grid(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !EPS1_GRID.contains(&self.eps1) {
            out.push("eps1");
        }
        if !P_GRID.contains(&self.p) {
            out.push("p");
        }
        if !EPS2_GRID.contains(&self.eps2) {
            out.push("eps2");
        }
        if !RHO_GRID.contains(&self.rho_threshold) {
            out.push("rho_threshold");
        }
        out
    }

    /// True when `self` is at least as permissive as `other` on every field.
    pub fn dominates(&self, other: &StopCriteria) -> bool {
        self.eps1 >= other.eps1 && self.eps2 >= other.eps2 && self.p <= other.p && self.rho_threshold <= other.rho_threshold
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub corr: f64,
    pub val: f64,
    /// Mean train acuity correlation over the three scores.
    pub rho: f64,
    /// Global gradient norm of the last update, after clipping when enabled.
    pub grad_norm: f64,
    /// Stabilizer penalty (stiffness regularization); zero otherwise.
    #[serde(default)]
    pub penalty: f64,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Shared correlation weight; `None` when the three scores are weighted separately.
    pub lambda: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn new(lambda: Option<f64>) -> Self {
        Self {
            lambda,
            epochs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn push(&mut self, e: EpochRecord) {
        debug_assert_eq!(e.epoch, self.epochs.len());
        self.epochs.push(e);
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }

    pub fn mses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mse).collect()
    }

    pub fn corrs(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.corr).collect()
    }

    pub fn vals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val).collect()
    }

    /// Contiguous epochs from 0 and `total == mse + λ·corr` for a shared λ.
    pub fn validate(&self) -> Result<(), String> {
        for (i, e) in self.epochs.iter().enumerate() {
            if e.epoch != i {
                return Err(format!("epoch index {} at position {i}", e.epoch));
            }
            let Some(lambda) = self.lambda else { continue };
            let expect = e.mse + lambda * e.corr;
            if (e.total - expect).abs() > 1e-9 * (1.0 + expect.abs()) {
                return Err(format!("epoch {i}: total {} != mse + λ·corr = {expect}", e.total));
            }
        }
        Ok(())
    }
}

/// Criterion values at one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriteriaEval {
    pub epoch: usize,
    /// `L_val(e) − min_{e' ≤ e} L_val(e')`
    pub val_gap: f64,
    /// `max − min` of the training loss on the window.
    pub window_spread: f64,
    /// Allowed spread: `ε2·min`, or `ε2` when the window minimum is not positive.
    pub window_tol: f64,
    pub rho: f64,
    pub near_optimal: bool,
    pub plateau: bool,
    pub rho_ok: bool,
}

impl CriteriaEval {
    pub fn all(&self) -> bool {
        self.near_optimal && self.plateau && self.rho_ok
    }

    fn held(&self) -> [bool; 3] {
        [self.near_optimal, self.plateau, self.rho_ok]
    }

    /// How far each criterion is from holding (≤ 0 means it holds).
    fn shortfall(&self, c: &StopCriteria) -> [f64; 3] {
        [
            self.val_gap - c.eps1,
            self.window_spread - self.window_tol,
            c.rho_threshold - self.rho,
        ]
    }
}

/// Evaluates all three criteria at epoch `e`. `None` until the window is full
/// (`e < p`) or when `e` is past the end of the record.
pub fn evaluate(record: &TrainRecord, c: &StopCriteria, e: usize) -> Option<CriteriaEval> {
    if e < c.p || e >= record.epochs.len() {
        return None;
    }
    let ep = &record.epochs[..=e];
    let val_min = ep.iter().map(|r| r.val).fold(f64::INFINITY, f64::min);
    let val_gap = ep[e].val - val_min;
    let window = &ep[e - c.p..=e];
    let lo = window.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    let hi = window.iter().map(|r| r.total).fold(f64::NEG_INFINITY, f64::max);
    let window_tol = if lo > 0.0 { c.eps2 * lo } else { c.eps2 };
    let spread = hi - lo;
    let rho = ep[e].rho;
    Some(CriteriaEval {
        epoch: e,
        val_gap,
        window_spread: spread,
        window_tol,
        rho,
        near_optimal: val_gap <= c.eps1,
        plateau: spread <= window_tol,
        rho_ok: rho >= c.rho_threshold,
    })
}

pub fn check_stop(record: &TrainRecord, c: &StopCriteria, e: usize) -> bool {
    evaluate(record, c, e).is_some_and(|v| v.all())
}

/// First epoch at which every criterion holds.
pub fn first_stop(record: &TrainRecord, c: &StopCriteria) -> Option<usize> {
    (c.p..record.epochs.len()).find(|&e| check_stop(record, c, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoints {
    pub optimal_stable: usize,
    pub overtrained_unstable: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    NearOptimalValidation,
    StablePlateau,
    AcuityCorrelation,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::NearOptimalValidation => "near-optimal validation loss",
            Criterion::StablePlateau => "stable training plateau",
            Criterion::AcuityCorrelation => "acuity correlation threshold",
        })
    }
}

const CRITERIA: [Criterion; 3] = [
    Criterion::NearOptimalValidation,
    Criterion::StablePlateau,
    Criterion::AcuityCorrelation,
];

/// Why no epoch qualified.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("no stable checkpoint: {}", self.summary())]
pub struct NoStableCheckpoint {
    pub epochs_evaluated: usize,
    /// Epochs on which each criterion held on its own.
    pub held: [usize; 3],
    /// Smallest shortfall seen per criterion (≤ 0 when it held somewhere).
    pub closest: [f64; 3],
    /// Epoch with the most criteria satisfied (earliest on ties).
    pub closest_epoch: Option<usize>,
}

impl NoStableCheckpoint {
    pub fn never_met(&self) -> Vec<Criterion> {
        CRITERIA.iter().zip(self.held).filter(|(_, n)| *n == 0).map(|(c, _)| *c).collect()
    }

    fn summary(&self) -> String {
        if self.epochs_evaluated == 0 {
            return "record shorter than the plateau window".into();
        }
        let never = self.never_met();
        let mut s = if never.is_empty() {
            "criteria held individually but never together".to_string()
        } else {
            let names: Vec<String> = never.iter().map(|c| c.to_string()).collect();
            format!("never met: {}", names.join(", "))
        };
        for (c, m) in CRITERIA.iter().zip(self.closest) {
            s.push_str(&format!("; {c}: closest miss {m:.4}"));
        }
        if let Some(e) = self.closest_epoch {
            s.push_str(&format!("; closest epoch {e}"));
        }
        s
    }
}

/// Picks the first stopping epoch and the overtrained foil.
///
/// The foil is the final epoch unless, after the plateau has been left (the
/// first epoch past `e*` whose stop check fails), the stop check fires again;
/// in that case it is the epoch of maximal validation loss after `e*`.
pub fn select_checkpoints(record: &TrainRecord, c: &StopCriteria) -> Result<Checkpoints, NoStableCheckpoint> {
    let n = record.epochs.len();
    let Some(star) = first_stop(record, c) else {
        return Err(diagnose(record, c));
    };
    let exit = (star + 1..n).find(|&e| !check_stop(record, c, e));
    let refires = exit.is_some_and(|x| (x + 1..n).any(|e| check_stop(record, c, e)));
    let overtrained = if refires {
        let mut best = star + 1;
        for e in star + 1..n {
            if record.epochs[e].val > record.epochs[best].val {
                best = e;
            }
        }
        best
    } else {
        n - 1
    };
    Ok(Checkpoints {
        optimal_stable: star,
        overtrained_unstable: overtrained,
    })
}

fn diagnose(record: &TrainRecord, c: &StopCriteria) -> NoStableCheckpoint {
    let mut d = NoStableCheckpoint {
        epochs_evaluated: 0,
        held: [0; 3],
        closest: [f64::INFINITY; 3],
        closest_epoch: None,
    };
    let mut best_count = 0;
    for e in c.p..record.epochs.len() {
        let Some(v) = evaluate(record, c, e) else { continue };
        d.epochs_evaluated += 1;
        let held = v.held();
        let short = v.shortfall(c);
        for k in 0..3 {
            d.held[k] += held[k] as usize;
            d.closest[k] = d.closest[k].min(short[k]);
        }
        let count = held.iter().filter(|h| **h).count();
        if d.closest_epoch.is_none() || count > best_count {
            best_count = count;
            d.closest_epoch = Some(e);
        }
    }
    d
}

/// Plain-text stopping report.
pub fn stopping_report(
    record: &TrainRecord,
    c: &StopCriteria,
    result: &Result<Checkpoints, NoStableCheckpoint>,
    checkpoint_paths: &[(&str, String)],
) -> String {
    let mut s = format!(
        "criteria: eps1={} p={} eps2={} rho_threshold={}\nepochs: {}\n",
        c.eps1,
        c.p,
        c.eps2,
        c.rho_threshold,
        record.len()
    );
    match result {
        Ok(cp) => {
            s.push_str(&format!("optimal_stable: {}\n", cp.optimal_stable));
            if let Some(v) = evaluate(record, c, cp.optimal_stable) {
                s.push_str(&format!(
                    "  val_gap={:.6} (<= {})\n  window_spread={:.6} (<= {:.6})\n  rho={:.6} (>= {})\n",
                    v.val_gap, c.eps1, v.window_spread, v.window_tol, v.rho, c.rho_threshold
                ));
            }
            s.push_str(&format!("overtrained_unstable: {}\n", cp.overtrained_unstable));
        }
        Err(e) => s.push_str(&format!("{e}\n")),
    }
    for (label, path) in checkpoint_paths {
        s.push_str(&format!("{label}: {path}\n"));
    }
    s
}
