use crate::cde::{BatchPlan, StepPlan};
use crate::cohort::Trajectory;
use crate::diffcore::Array;

use super::ModelError;

/// A trajectory with its step schedule computed once for a given step size.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub patient_id: u64,
    pub plan: StepPlan,
    /// `K×d`
    pub observations: Array,
    /// `[sofa, sapsii, oasis]` per step.
    pub acuity: Vec<[f64; 3]>,
}

pub fn prepare(traj: &Trajectory, dt: f64) -> Result<Prepared, ModelError> {
    let path = traj.control_path()?;
    let plan = StepPlan::new(&path, &traj.times, dt)?;
    Ok(Prepared {
        patient_id: traj.patient_id,
        plan,
        observations: traj.observations.clone(),
        acuity: traj.acuity.iter().map(|a| a.as_array()).collect(),
    })
}

/// Trajectories aligned for one batched forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub plan: BatchPlan,
    /// First observation of each trajectory, `B×d`.
    pub x0: Array,
    /// Every observation stacked, `N×d`, in the order of the forward outputs.
    pub targets: Array,
    /// Acuity columns aligned with `targets`.
    pub scores: [Vec<f64>; 3],
    pub ids: Vec<u64>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new(items: &[&Prepared]) -> Result<Self, ModelError> {
        if items.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let d = items[0].observations.cols();
        let plans: Vec<StepPlan> = items.iter().map(|p| p.plan.clone()).collect();
        let plan = BatchPlan::new(&plans)?;
        let mut x0 = Vec::with_capacity(items.len() * d);
        let mut targets = Vec::new();
        let mut scores: [Vec<f64>; 3] = Default::default();
        for p in items {
            if p.observations.cols() != d {
                return Err(ModelError::Config("feature width differs within batch".into()));
            }
            x0.extend_from_slice(p.observations.row(0));
            targets.extend_from_slice(p.observations.data());
            for a in &p.acuity {
                for (col, v) in scores.iter_mut().zip(a) {
                    col.push(*v);
                }
            }
        }
        let n = targets.len() / d;
        Ok(Batch {
            plan,
            x0: Array::matrix(items.len(), d, x0)?,
            targets: Array::matrix(n, d, targets)?,
            scores,
            ids: items.iter().map(|p| p.patient_id).collect(),
            lengths: items.iter().map(|p| p.observations.rows()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.targets.rows()
    }
}
