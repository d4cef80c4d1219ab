use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Mlp, Standardizer};
use super::wis::ActionModel;
use super::RlError;
use crate::diffcore::{softmax_rows, Array, Tape};
use crate::model::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            hidden: 64,
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(RlError::Config("behavior sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(RlError::Config("behavior learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Softmax classifier of the logged action given the latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    pub(crate) net: Mlp,
    pub(crate) norm: Standardizer,
}

impl BehaviorPolicy {
    pub fn logits(&self, states: &Array) -> Result<Array, RlError> {
        Ok(self.net.eval(&self.norm.apply(states))?)
    }

    pub fn predict(&self, states: &Array) -> Result<Vec<usize>, RlError> {
        let p = self.probs(states)?;
        Ok((0..p.rows()).map(|r| argmax(p.row(r))).collect())
    }

    pub fn accuracy(&self, states: &Array, actions: &[usize]) -> Result<f64, RlError> {
        let pred = self.predict(states)?;
        let hits = pred.iter().zip(actions).filter(|(p, a)| p == a).count();
        Ok(hits as f64 / actions.len().max(1) as f64)
    }
}

impl ActionModel for BehaviorPolicy {
    fn n_actions(&self) -> usize {
        *self.net.dims().last().expect("output width")
    }

    fn probs(&self, states: &Array) -> Result<Array, RlError> {
        let logits = self.logits(states)?;
        Ok(Array::matrix(logits.rows(), logits.cols(), softmax_rows(&logits))?)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    // first maximum wins ties
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BehaviorReport {
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub final_loss: f64,
}

/// Cross-entropy training of the behavior policy.
pub fn train_behavior(
    states: &Array,
    actions: &[usize],
    n_actions: usize,
    cfg: &BehaviorConfig,
    seed: u64,
    val: Option<(&Array, &[usize])>,
) -> Result<(BehaviorPolicy, BehaviorReport), RlError> {
    cfg.validate()?;
    if states.rows() != actions.len() || actions.is_empty() {
        return Err(RlError::Data("states and actions must align and be nonempty".into()));
    }
    if let Some(a) = actions.iter().find(|&&a| a >= n_actions) {
        return Err(RlError::Data(format!("action {a} outside 0..{n_actions}")));
    }
    if actions.iter().all(|&a| a == actions[0]) {
        log::warn!("behavior data holds a single action ({}); the classifier is degenerate", actions[0]);
    }
    let norm = Standardizer::fit(states);
    let x = norm.apply(states);
    let mut net = Mlp::new(&[states.cols(), cfg.hidden, n_actions], seed);
    let mut opt = Adam::new(net.params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..actions.len()).collect();
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let xb = gather(&x, idx);
            let yb: Vec<usize> = idx.iter().map(|&i| actions[i]).collect();
            let mut tape = Tape::new();
            let vars = net.params().bind(&mut tape);
            let xv = tape.constant(xb);
            let logits = net.forward(&mut tape, &vars, xv)?;
            let loss = tape.softmax_nll(logits, yb)?;
            sum += tape.value(loss).item() * idx.len() as f64;
            tape.backward(loss)?;
            let grads = net.params().grads(&tape, &vars);
            if !opt.step(net.params_mut(), &grads) {
                return Err(RlError::Divergence("behavior cloning produced a non-finite update".into()));
            }
        }
        last = sum / actions.len() as f64;
    }
    let policy = BehaviorPolicy { net, norm };
    let report = BehaviorReport {
        train_accuracy: policy.accuracy(states, actions)?,
        val_accuracy: val.map(|(s, a)| policy.accuracy(s, a)).transpose()?,
        final_loss: last,
    };
    Ok((policy, report))
}

pub(crate) fn gather(x: &Array, idx: &[usize]) -> Array {
    let d = x.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(x.row(i));
    }
    Array::matrix(idx.len(), d, out).expect("shape")
}
