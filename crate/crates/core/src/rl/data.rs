use crate::cde::SolverConfig;
use crate::cohort::Trajectory;
use crate::diffcore::Array;
use crate::model::{prepare, CdeAutoencoder, ModelError, Prepared};

/// One patient's encoded trajectory: latent state, logged action and reward
/// at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub patient_id: u64,
    /// `K×h`
    pub states: Array,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Undiscounted return.
    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Encodes trajectories with a frozen autoencoder.
pub fn encode_latents(
    model: &CdeAutoencoder,
    trajectories: &[&Trajectory],
    solver: &SolverConfig,
    batch_size: usize,
) -> Result<Vec<LatentTrajectory>, ModelError> {
    let prepared: Vec<Prepared> = trajectories.iter().map(|t| prepare(t, solver.dt)).collect::<Result<_, _>>()?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let states = model.encode_all(&refs, solver, batch_size)?;
    Ok(trajectories
        .iter()
        .zip(states)
        .map(|(t, s)| LatentTrajectory {
            patient_id: t.patient_id,
            states: s,
            actions: t.actions.clone(),
            rewards: t.rewards(),
        })
        .collect())
}

/// Flattened `(s, a, r, s', terminal)` tuples. For terminal transitions
/// `next_states` repeats the current state; it is never bootstrapped.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub states: Array,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Array,
    pub terminal: Vec<bool>,
}

impl Transitions {
    pub fn from_trajectories(trajs: &[LatentTrajectory]) -> Self {
        let h = trajs.first().map_or(0, |t| t.states.cols());
        let n: usize = trajs.iter().map(LatentTrajectory::len).sum();
        let (mut s, mut s2) = (Vec::with_capacity(n * h), Vec::with_capacity(n * h));
        let (mut a, mut r, mut done) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for t in trajs {
            let k = t.len();
            for i in 0..k {
                s.extend_from_slice(t.states.row(i));
                let last = i + 1 == k;
                s2.extend_from_slice(t.states.row(if last { i } else { i + 1 }));
                a.push(t.actions[i]);
                r.push(t.rewards[i]);
                done.push(last);
            }
        }
        Transitions {
            states: Array::matrix(n, h, s).expect("shape"),
            actions: a,
            rewards: r,
            next_states: Array::matrix(n, h, s2).expect("shape"),
            terminal: done,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Every state of every trajectory stacked, with the logged actions.
pub fn stack_states(trajs: &[LatentTrajectory]) -> (Array, Vec<usize>) {
    let h = trajs.first().map_or(0, |t| t.states.cols());
    let mut data = Vec::new();
    let mut actions = Vec::new();
    for t in trajs {
        data.extend_from_slice(t.states.data());
        actions.extend_from_slice(&t.actions);
    }
    (Array::matrix(actions.len(), h, data).expect("shape"), actions)
}
