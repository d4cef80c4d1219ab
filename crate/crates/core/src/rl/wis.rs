use serde::Serialize;

use super::{LatentTrajectory, RlError};
use crate::diffcore::Array;

/// Anything that assigns action probabilities to a batch of states.
pub trait ActionModel {
    fn n_actions(&self) -> usize;
    /// `N×A` row-stochastic matrix.
    fn probs(&self, states: &Array) -> Result<Array, RlError>;
}

/// Lookup-table policy over discrete states encoded one-hot (the state index
/// is the position of the largest coordinate).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub table: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(table: Vec<Vec<f64>>) -> Self {
        TabularPolicy { table }
    }

    pub fn state_index(row: &[f64]) -> usize {
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i)
    }
}

impl ActionModel for TabularPolicy {
    fn n_actions(&self) -> usize {
        self.table.first().map_or(0, Vec::len)
    }

    fn probs(&self, states: &Array) -> Result<Array, RlError> {
        let a = self.n_actions();
        let mut out = Vec::with_capacity(states.rows() * a);
        for r in 0..states.rows() {
            let s = Self::state_index(states.row(r));
            let row = self
                .table
                .get(s)
                .ok_or_else(|| RlError::Data(format!("tabular policy has no state {s}")))?;
            out.extend_from_slice(row);
        }
        Ok(Array::matrix(states.rows(), a, out)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WisReport {
    pub wis_return: f64,
    pub effective_sample_size: f64,
    /// `log w_i = Σ_t log π_e(a_t|s_t) − log π_b(a_t|s_t)`
    pub log_weights: Vec<f64>,
    /// `w_i / Σ w`
    pub normalized_weights: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Weighted importance sampling estimate of the evaluation policy's return.
/// Weights are accumulated in log space and normalized before exponentiation,
/// so long trajectories cannot overflow.
pub fn wis_evaluate(
    eval: &dyn ActionModel,
    behavior: &dyn ActionModel,
    trajs: &[LatentTrajectory],
) -> Result<WisReport, RlError> {
    if trajs.is_empty() {
        return Err(RlError::Evaluation("no trajectories to evaluate".into()));
    }
    let mut log_w = Vec::with_capacity(trajs.len());
    for t in trajs {
        let pe = eval.probs(&t.states)?;
        let pb = behavior.probs(&t.states)?;
        let mut lw = 0.0;
        for (i, &a) in t.actions.iter().enumerate() {
            let (e, b) = (pe.get2(i, a), pb.get2(i, a));
            if !(b > 0.0) {
                return Err(RlError::Evaluation(format!(
                    "behavior gives zero probability to logged action {a} of patient {}",
                    t.patient_id
                )));
            }
            lw += e.ln() - b.ln();
        }
        log_w.push(lw);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(RlError::Evaluation("every importance weight is zero".into()));
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|x| x * x).sum();
    let normalized: Vec<f64> = w.iter().map(|x| x / sum).collect();
    let returns: Vec<f64> = trajs.iter().map(LatentTrajectory::ret).collect();
    let wis = normalized.iter().zip(&returns).map(|(w, g)| w * g).sum();
    Ok(WisReport {
        wis_return: wis,
        effective_sample_size: sum * sum / sum_sq,
        log_weights: log_w,
        normalized_weights: normalized,
        returns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot(idx: &[usize], n: usize) -> Array {
        let mut d = vec![0.0; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            d[r * n + i] = 1.0;
        }
        Array::matrix(idx.len(), n, d).unwrap()
    }

    fn traj(id: u64, states: &[usize], actions: &[usize], ret: f64) -> LatentTrajectory {
        let mut rewards = vec![0.0; actions.len()];
        *rewards.last_mut().unwrap() = ret;
        LatentTrajectory {
            patient_id: id,
            states: one_hot(states, 2),
            actions: actions.to_vec(),
            rewards,
        }
    }

    #[test]
    fn on_policy_reduces_to_mean_return() {
        let pb = TabularPolicy::new(vec![vec![0.3, 0.7], vec![0.6, 0.4]]);
        let ts = [traj(0, &[0, 1], &[1, 0], 1.0), traj(1, &[1, 0], &[0, 0], -1.0), traj(2, &[0], &[1], 1.0)];
        let r = wis_evaluate(&pb, &pb, &ts).unwrap();
        assert!(r.log_weights.iter().all(|l| l.abs() < 1e-15));
        assert!((r.wis_return - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.effective_sample_size - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hand_weighted_pair() {
        // weights 3 and 1 for returns +1 and -1
        let pb = TabularPolicy::new(vec![vec![0.25, 0.75], vec![0.5, 0.5]]);
        let pe = TabularPolicy::new(vec![vec![0.75, 0.25], vec![0.5, 0.5]]);
        let ts = [traj(0, &[0], &[0], 1.0), traj(1, &[1], &[0], -1.0)];
        let r = wis_evaluate(&pe, &pb, &ts).unwrap();
        assert!((r.wis_return - 0.5).abs() < 1e-15);
        assert!((r.effective_sample_size - 16.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_are_an_error() {
        let pb = TabularPolicy::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let pe = TabularPolicy::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        let ts = [traj(0, &[0], &[0], 1.0)];
        assert!(matches!(wis_evaluate(&pe, &pb, &ts), Err(RlError::Evaluation(_))));
        assert!(wis_evaluate(&pb, &pb, &[]).is_err());
    }

    proptest! {
        #[test]
        fn estimate_is_a_convex_combination(
            probs in prop::collection::vec(0.05f64..1.0, 8),
            acts in prop::collection::vec(0usize..2, 12),
            rets in prop::collection::vec(-1.0f64..1.0, 4),
        ) {
            let norm = |a: f64, b: f64| vec![a / (a + b), b / (a + b)];
            let pb = TabularPolicy::new(vec![norm(probs[0], probs[1]), norm(probs[2], probs[3])]);
            let pe = TabularPolicy::new(vec![norm(probs[4], probs[5]), norm(probs[6], probs[7])]);
            let ts: Vec<_> = (0..4)
                .map(|i| traj(i as u64, &[i % 2, (i + 1) % 2, 0], &acts[3 * i..3 * i + 3], rets[i]))
                .collect();
            let r = wis_evaluate(&pe, &pb, &ts).unwrap();
            let lo = rets.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = rets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.wis_return >= lo - 1e-12 && r.wis_return <= hi + 1e-12);
            prop_assert!((r.normalized_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

            // scaling every behavior probability of action 0 and 1 by one constant cancels
            let scaled = TabularPolicy::new(pb.table.iter().map(|r| r.iter().map(|p| p * 0.5).collect()).collect());
            let r2 = wis_evaluate(&pe, &scaled, &ts).unwrap();
            prop_assert!((r.wis_return - r2.wis_return).abs() < 1e-12);
        }
    }
}
