//! Offline reinforcement learning on frozen latent states: behavior cloning,
//! discrete batch-constrained Q-learning and weighted importance sampling.

mod behavior;
mod data;
mod dbcq;
mod net;
mod wis;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use behavior::{train_behavior, BehaviorConfig, BehaviorPolicy, BehaviorReport};
pub use data::{encode_latents, stack_states, LatentTrajectory, Transitions};
pub use dbcq::{admissible, train_dbcq, DbcqConfig, DbcqReport, QPolicy, SoftenedGreedy};
pub use net::{Mlp, Standardizer};
pub use wis::{wis_evaluate, ActionModel, TabularPolicy, WisReport};

use crate::diffcore::{Array, DiffError};
use crate::model::checkpoint::{read_container, write_container};
use crate::model::{ModelError, ParamSet};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("rl configuration: {0}")]
    Config(String),
    #[error("rl data: {0}")]
    Data(String),
    #[error("Q-learning diverged: {0}")]
    Divergence(String),
    #[error("importance sampling: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub behavior: BehaviorConfig,
    pub dbcq: DbcqConfig,
    /// Mass spread uniformly over all actions by the evaluation policy.
    pub epsilon: f64,
    /// Updates between validation WIS evaluations.
    pub eval_every: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            behavior: BehaviorConfig::default(),
            dbcq: DbcqConfig::default(),
            epsilon: 0.01,
            eval_every: 1000,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        self.behavior.validate()?;
        self.dbcq.validate()?;
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(RlError::Config(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Behavior model, Q-function and the softening used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub behavior: BehaviorPolicy,
    pub q: QPolicy,
    pub epsilon: f64,
}

impl PolicyBundle {
    pub fn evaluation_policy(&self) -> SoftenedGreedy<'_> {
        SoftenedGreedy {
            policy: &self.q,
            behavior: &self.behavior,
            epsilon: self.epsilon,
        }
    }

    pub fn wis(&self, trajs: &[LatentTrajectory]) -> Result<WisReport, RlError> {
        wis_evaluate(&self.evaluation_policy(), &self.behavior, trajs)
    }
}

pub const POLICY_KIND: &str = "policy_bundle";

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    behavior_dims: Vec<usize>,
    q_dims: Vec<usize>,
    tau_bc: f64,
    sync_interval: usize,
    epsilon: f64,
}

pub fn save_policy(path: &Path, bundle: &PolicyBundle) -> Result<(), RlError> {
    let mut all = ParamSet::new();
    let mut add = |prefix: &str, p: &ParamSet| {
        for (n, v) in p.names().iter().zip(p.values()) {
            all.push(format!("{prefix}.{n}"), v.clone());
        }
    };
    add("behavior", bundle.behavior.net.params());
    add("q", bundle.q.q.params());
    add("target", bundle.q.target.params());
    let [m, s] = bundle.behavior.norm.to_arrays();
    all.push("behavior.norm.mean", m);
    all.push("behavior.norm.inv_std", s);
    let [m, s] = bundle.q.norm.to_arrays();
    all.push("q.norm.mean", m);
    all.push("q.norm.inv_std", s);
    let meta = BundleMeta {
        behavior_dims: bundle.behavior.net.dims().to_vec(),
        q_dims: bundle.q.q.dims().to_vec(),
        tau_bc: bundle.q.tau_bc,
        sync_interval: bundle.q.sync_interval,
        epsilon: bundle.epsilon,
    };
    let meta = serde_json::to_value(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    Ok(write_container(path, POLICY_KIND, meta, &all)?)
}

pub fn load_policy(path: &Path) -> Result<PolicyBundle, RlError> {
    let (kind, meta, all) = read_container(path)?;
    if kind != POLICY_KIND {
        return Err(ModelError::Checkpoint(format!("{} holds a '{kind}', not a policy", path.display())).into());
    }
    let meta: BundleMeta = serde_json::from_value(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let take = |prefix: &str| {
        let mut p = ParamSet::new();
        for (n, v) in all.names().iter().zip(all.values()) {
            if let Some(rest) = n.strip_prefix(prefix) {
                if !rest.starts_with("norm.") {
                    p.push(rest.to_string(), v.clone());
                }
            }
        }
        p
    };
    let get = |n: &str| {
        all.by_name(n)
            .ok_or_else(|| RlError::Model(ModelError::Checkpoint(format!("missing tensor {n}"))))
    };
    let behavior = BehaviorPolicy {
        net: Mlp::from_params(&meta.behavior_dims, take("behavior."))?,
        norm: Standardizer::from_arrays(get("behavior.norm.mean")?, get("behavior.norm.inv_std")?),
    };
    let q = QPolicy {
        q: Mlp::from_params(&meta.q_dims, take("q."))?,
        target: Mlp::from_params(&meta.q_dims, take("target."))?,
        norm: Standardizer::from_arrays(get("q.norm.mean")?, get("q.norm.inv_std")?),
        tau_bc: meta.tau_bc,
        sync_interval: meta.sync_interval,
    };
    Ok(PolicyBundle {
        behavior,
        q,
        epsilon: meta.epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WisPoint {
    pub step: usize,
    pub wis: f64,
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub bundle: PolicyBundle,
    pub behavior_report: BehaviorReport,
    pub dbcq_report: DbcqReport,
    /// Validation WIS after every `eval_every` updates.
    pub wis_series: Vec<WisPoint>,
    pub final_wis: WisReport,
}

/// Behavior cloning, then dBCQ with periodic validation WIS.
pub fn run_offline_rl(
    train: &[LatentTrajectory],
    val: &[LatentTrajectory],
    n_actions: usize,
    cfg: &RlConfig,
    seed: u64,
) -> Result<RlOutcome, RlError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(RlError::Data("need train and validation trajectories".into()));
    }
    let (s, a) = stack_states(train);
    let (vs, va) = stack_states(val);
    let (behavior, behavior_report) = train_behavior(&s, &a, n_actions, &cfg.behavior, seed, Some((&vs, &va)))?;
    log::info!(
        "behavior cloning: train accuracy {:.3}, validation accuracy {:.3}",
        behavior_report.train_accuracy,
        behavior_report.val_accuracy.unwrap_or(f64::NAN)
    );
    let data = Transitions::from_trajectories(train);
    let mut series = Vec::new();
    let (q, dbcq_report) = train_dbcq(&data, &behavior, &cfg.dbcq, seed, cfg.eval_every, |step, q| {
        let eval = SoftenedGreedy {
            policy: q,
            behavior: &behavior,
            epsilon: cfg.epsilon,
        };
        let r = wis_evaluate(&eval, &behavior, val)?;
        log::debug!("dBCQ step {step}: WIS {:.4} ESS {:.1}", r.wis_return, r.effective_sample_size);
        series.push(WisPoint {
            step,
            wis: r.wis_return,
            ess: r.effective_sample_size,
        });
        Ok(())
    })?;
    let bundle = PolicyBundle {
        behavior,
        q,
        epsilon: cfg.epsilon,
    };
    let final_wis = bundle.wis(val)?;
    Ok(RlOutcome {
        bundle,
        behavior_report,
        dbcq_report,
        wis_series: series,
        final_wis,
    })
}

/// Behavior probabilities of the logged actions, for diagnostics.
pub fn logged_action_probs(behavior: &dyn ActionModel, t: &LatentTrajectory) -> Result<Vec<f64>, RlError> {
    let p: Array = behavior.probs(&t.states)?;
    Ok(t.actions.iter().enumerate().map(|(i, &a)| p.get2(i, a)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(n: usize, seed: u64) -> Vec<LatentTrajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let k = rng.random_range(2..6);
                let sev: f64 = rng.random_range(-1.0..1.0);
                let states = Array::matrix(k, 3, (0..k * 3).map(|j| sev + 0.1 * (j % 3) as f64).collect()).unwrap();
                let actions = (0..k).map(|_| if sev > 0.0 { 6 } else { 0 }).collect();
                let mut rewards = vec![0.0; k];
                rewards[k - 1] = if sev > 0.5 { -1.0 } else { 1.0 };
                LatentTrajectory {
                    patient_id: i as u64,
                    states,
                    actions,
                    rewards,
                }
            })
            .collect()
    }

    #[test]
    fn pipeline_runs_and_policy_round_trips() {
        let train = synthetic(60, 1);
        let val = synthetic(20, 2);
        let cfg = RlConfig {
            behavior: BehaviorConfig { epochs: 20, learning_rate: 1e-2, ..Default::default() },
            dbcq: DbcqConfig { steps: 200, learning_rate: 1e-3, batch_size: 32, sync_interval: 50, hidden: vec![8], ..Default::default() },
            eval_every: 50,
            ..Default::default()
        };
        let out = run_offline_rl(&train, &val, 25, &cfg, 3).unwrap();
        assert_eq!(out.wis_series.len(), 4);
        assert!(out.final_wis.wis_return.abs() <= 1.0);
        assert_eq!(out.wis_series.last().unwrap().wis, out.final_wis.wis_return);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        save_policy(&path, &out.bundle).unwrap();
        let back = load_policy(&path).unwrap();
        assert_eq!(back, out.bundle);
        assert_eq!(back.wis(&val).unwrap().wis_return, out.final_wis.wis_return);
    }
}
