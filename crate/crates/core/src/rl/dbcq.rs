use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::behavior::gather;
use super::net::{Mlp, Standardizer};
use super::wis::ActionModel;
use super::{RlError, Transitions};
use crate::diffcore::{Array, Tape};
use crate::model::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbcqConfig {
    pub learning_rate: f64,
    /// Admissibility threshold on `π_b(a|s) / max_a' π_b(a'|s)`.
    pub tau_bc: f64,
    /// Number of gradient updates.
    pub steps: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub sync_interval: usize,
    pub hidden: Vec<usize>,
    pub huber_delta: f64,
    /// Slack above `max|r| / (1 − γ)` before training aborts.
    pub q_margin: f64,
}

impl Default for DbcqConfig {
    fn default() -> Self {
        DbcqConfig {
            learning_rate: 1e-5,
            tau_bc: 0.3,
            steps: 200_000,
            gamma: 0.99,
            batch_size: 256,
            sync_interval: 1000,
            hidden: vec![64, 64],
            huber_delta: 1.0,
            q_margin: 1.0,
        }
    }
}

impl DbcqConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(RlError::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(RlError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_bc) {
            return Err(RlError::Config(format!("tau_bc must lie in [0, 1], got {}", self.tau_bc)));
        }
        if self.batch_size == 0 || self.sync_interval == 0 {
            return Err(RlError::Config("batch_size and sync_interval must be positive".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(RlError::Config("huber_delta must be positive".into()));
        }
        Ok(())
    }
}

/// Actions whose behavior probability is at least `tau` times the state's
/// most likely action. Never empty: the most likely action always qualifies.
pub fn admissible(probs: &[f64], tau: f64) -> Vec<bool> {
    let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    probs.iter().map(|&p| p >= tau * max).collect()
}

fn best_admissible(q: &[f64], mask: &[bool]) -> usize {
    let mut best = None;
    for (i, (&v, &ok)) in q.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|b: usize| v > q[b]) {
            best = Some(i);
        }
    }
    best.expect("admissible set is never empty")
}

#[derive(Debug, Clone, PartialEq)]
pub struct QPolicy {
    pub(crate) q: Mlp,
    pub(crate) target: Mlp,
    pub(crate) norm: Standardizer,
    pub tau_bc: f64,
    pub sync_interval: usize,
}

impl QPolicy {
    pub fn n_actions(&self) -> usize {
        *self.q.dims().last().expect("output width")
    }

    pub fn q_values(&self, states: &Array) -> Result<Array, RlError> {
        Ok(self.q.eval(&self.norm.apply(states))?)
    }

    /// Highest-value action within each state's admissible set.
    pub fn greedy(&self, states: &Array, behavior: &dyn ActionModel) -> Result<Vec<usize>, RlError> {
        let q = self.q_values(states)?;
        let pb = behavior.probs(states)?;
        Ok((0..states.rows())
            .map(|r| best_admissible(q.row(r), &admissible(pb.row(r), self.tau_bc)))
            .collect())
    }
}

/// `(1 − ε)·greedy + ε/A`, the evaluation policy for importance sampling.
pub struct SoftenedGreedy<'a> {
    pub policy: &'a QPolicy,
    pub behavior: &'a dyn ActionModel,
    pub epsilon: f64,
}

impl ActionModel for SoftenedGreedy<'_> {
    fn n_actions(&self) -> usize {
        self.policy.n_actions()
    }

    fn probs(&self, states: &Array) -> Result<Array, RlError> {
        let a = self.n_actions();
        let g = self.policy.greedy(states, self.behavior)?;
        let mut out = vec![self.epsilon / a as f64; states.rows() * a];
        for (r, &k) in g.iter().enumerate() {
            out[r * a + k] += 1.0 - self.epsilon;
        }
        Ok(Array::matrix(states.rows(), a, out)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DbcqReport {
    pub steps: usize,
    pub final_loss: f64,
    pub max_abs_q: f64,
}

/// Discrete batch-constrained Q-learning. The bootstrap target uses the
/// online network to pick the best admissible next action and the target
/// network to value it. `on_eval(step, policy)` runs every `eval_every`
/// updates (and after the last one) when `eval_every > 0`.
pub fn train_dbcq(
    data: &Transitions,
    behavior: &dyn ActionModel,
    cfg: &DbcqConfig,
    seed: u64,
    eval_every: usize,
    mut on_eval: impl FnMut(usize, &QPolicy) -> Result<(), RlError>,
) -> Result<(QPolicy, DbcqReport), RlError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(RlError::Data("no transitions".into()));
    }
    let n_actions = behavior.n_actions();
    if let Some(a) = data.actions.iter().find(|&&a| a >= n_actions) {
        return Err(RlError::Data(format!("action {a} outside 0..{n_actions}")));
    }
    let norm = Standardizer::fit(&data.states);
    let s = norm.apply(&data.states);
    let s2 = norm.apply(&data.next_states);
    let next_probs = behavior.probs(&data.next_states)?;
    let next_masks: Vec<Vec<bool>> = (0..data.len()).map(|r| admissible(next_probs.row(r), cfg.tau_bc)).collect();

    let mut dims = vec![data.states.cols()];
    dims.extend(&cfg.hidden);
    dims.push(n_actions);
    // small initial values keep early bootstraps inside the return range
    let q = Mlp::with_output_gain(&dims, seed, 0.1);
    let mut policy = QPolicy {
        target: q.clone(),
        q,
        norm,
        tau_bc: cfg.tau_bc,
        sync_interval: cfg.sync_interval,
    };
    let mut opt = Adam::new(policy.q.params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);

    let r_max = data.rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let bound = if cfg.gamma < 1.0 { r_max / (1.0 - cfg.gamma) } else { f64::INFINITY } + cfg.q_margin;
    let mut report = DbcqReport {
        steps: 0,
        final_loss: f64::NAN,
        max_abs_q: 0.0,
    };
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let next = gather(&s2, &idx);
        let q_next = policy.q.eval(&next)?;
        let q_targ = policy.target.eval(&next)?;
        let y: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                if data.terminal[i] {
                    data.rewards[i]
                } else {
                    let a = best_admissible(q_next.row(k), &next_masks[i]);
                    data.rewards[i] + cfg.gamma * q_targ.get2(k, a)
                }
            })
            .collect();

        let mut tape = Tape::new();
        let vars = policy.q.params().bind(&mut tape);
        let x = tape.constant(gather(&s, &idx));
        let out = policy.q.forward(&mut tape, &vars, x)?;
        let chosen = tape.pick(out, idx.iter().map(|&i| data.actions[i]).collect())?;
        let target = tape.constant(Array::vector(y));
        let diff = tape.sub(chosen, target)?;
        let h = tape.huber(diff, cfg.huber_delta);
        let loss = tape.mean(h);
        let max_q = tape.value(out).max_abs();
        report.max_abs_q = report.max_abs_q.max(max_q);
        if !(max_q <= bound) {
            return Err(RlError::Divergence(format!(
                "step {step}: max |Q| = {max_q:.3e} exceeds the return bound {bound:.3}"
            )));
        }
        report.final_loss = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = policy.q.params().grads(&tape, &vars);
        if !opt.step(policy.q.params_mut(), &grads) {
            return Err(RlError::Divergence(format!("step {step}: non-finite Q-network update")));
        }
        if step % cfg.sync_interval == 0 {
            policy.target = policy.q.clone();
        }
        report.steps = step;
        if eval_every > 0 && (step % eval_every == 0 || step == cfg.steps) {
            on_eval(step, &policy)?;
        }
    }
    Ok((policy, report))
}
