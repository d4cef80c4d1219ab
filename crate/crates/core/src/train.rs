//! Autoencoder training with per-epoch records, in-memory snapshots and
//! checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cde::{SolverConfig, SolverKind};
use crate::cohort::Trajectory;
use crate::diffcore::{Array, Tape};
use crate::earlystop::{select_checkpoints, Checkpoints, EpochRecord, NoStableCheckpoint, StopCriteria, TrainRecord};
use crate::model::{
    acuity_correlation_value, loss_total, prepare, Adam, Batch, CdeAutoencoder, LossBreakdown, ModelConfig,
    ModelError, ParamSet, Prepared,
};
use crate::stabilize::{clip_gradients, flatness, stiffness_penalty, FlatnessReport, StabilizerConfig, StabilizerMethod};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error(
        "epoch {epoch}: {skipped} of {batches} batches failed numerically (limit {limit:.0}%); last failure: {last}"
    )]
    Diverged {
        epoch: usize,
        skipped: usize,
        batches: usize,
        limit: f64,
        last: String,
    },
    #[error("validation loss is not finite at epoch {0}")]
    NonFiniteValidation(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the acuity-correlation loss, shared by the three scores.
    pub lambda: f64,
    /// Per-score weights `[sofa, sapsii, oasis]`; overrides `lambda` when set.
    pub lambda_per_score: Option<[f64; 3]>,
    /// Train trajectories used for the per-epoch acuity correlation.
    pub rho_subsample: usize,
    pub eval_batch_size: usize,
    /// Fraction of failed batches in one epoch that aborts training.
    pub max_failed_fraction: f64,
    pub solver: SolverConfig,
    pub stabilizer: StabilizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 2e-4,
            lambda: 1.0,
            lambda_per_score: None,
            rho_subsample: 512,
            eval_batch_size: 128,
            max_failed_fraction: 0.1,
            solver: SolverConfig::rk4(0.5),
            stabilizer: StabilizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lambdas(&self) -> [f64; 3] {
        self.lambda_per_score.unwrap_or([self.lambda; 3])
    }

    /// Solver actually used: the implicit-Adams stabilizer forces the implicit solver.
    pub fn effective_solver(&self) -> SolverConfig {
        let mut s = self.solver.clone();
        if self.stabilizer.method == StabilizerMethod::ImplicitAdams {
            s.kind = SolverKind::ImplicitAdams;
        }
        s
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.lambdas().iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("lambda must be finite and nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.max_failed_fraction) {
            return bad("max_failed_fraction must lie in [0, 1]".into());
        }
        if self.rho_subsample < 2 {
            return bad("rho_subsample must be at least 2".into());
        }
        self.solver.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.stabilizer.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Everything a training run produces. `snapshots[e]` holds the parameters
/// after epoch `e`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model_config: ModelConfig,
    pub record: TrainRecord,
    pub snapshots: Vec<ParamSet>,
    pub selection: Result<Checkpoints, NoStableCheckpoint>,
    pub flatness: Option<FlatnessReport>,
}

impl TrainOutcome {
    pub fn model_at(&self, epoch: usize) -> Result<CdeAutoencoder, ModelError> {
        let params = self
            .snapshots
            .get(epoch)
            .ok_or_else(|| ModelError::Config(format!("no snapshot for epoch {epoch}")))?;
        CdeAutoencoder::from_params(self.model_config.clone(), params.clone())
    }
}

/// Frozen-parameter evaluation of the loss over a whole set, with latents
/// pooled across every timestep of every trajectory.
pub fn evaluate_loss(
    model: &CdeAutoencoder,
    items: &[&Prepared],
    solver: &SolverConfig,
    batch_size: usize,
    lambdas: [f64; 3],
) -> Result<LossBreakdown, ModelError> {
    let h = model.hidden_size();
    let mut latents = Vec::new();
    let mut sq = 0.0;
    let mut n_vals = 0usize;
    let mut scores: [Vec<f64>; 3] = Default::default();
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk)?;
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let fwd = bound.forward(&mut tape, &batch, solver)?;
        let recon = tape.value(fwd.recon);
        sq += recon.data().iter().zip(batch.targets.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n_vals += recon.len();
        latents.extend_from_slice(tape.value(fwd.latents).data());
        for (dst, src) in scores.iter_mut().zip(&batch.scores) {
            dst.extend_from_slice(src);
        }
    }
    let lat = Array::matrix(latents.len() / h, h, latents)?;
    let mut rho = [0.0; 3];
    for k in 0..3 {
        rho[k] = acuity_correlation_value(&lat, &scores[k])?;
    }
    let mse = sq / n_vals as f64;
    let corr = -(rho[0] + rho[1] + rho[2]);
    let reg = if lambdas[0] == lambdas[1] && lambdas[1] == lambdas[2] {
        lambdas[0] * corr
    } else {
        -(lambdas[0] * rho[0] + lambdas[1] * rho[1] + lambdas[2] * rho[2])
    };
    Ok(LossBreakdown {
        mse,
        corr,
        total: mse + reg,
        rho,
    })
}

/// Totals of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// `λ_reg · penalty` (zero unless stiffness regularization is on).
    pub penalty: f64,
    pub objective: f64,
    pub pre_clip_norm: f64,
    pub grad_norm: f64,
    pub stiffness_fallbacks: usize,
}

/// Gradient of the training objective on one batch. Returns the gradients and
/// the step summary without touching the parameters.
pub fn batch_gradient(
    model: &CdeAutoencoder,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(Vec<Array>, StepOutcome), ModelError> {
    let solver = cfg.effective_solver();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = bound.forward(&mut tape, batch, &solver)?;
    let terms = loss_total(&mut tape, &fwd, batch, cfg.lambdas())?;
    let mut objective = terms.total;
    let mut penalty = 0.0;
    let mut fallbacks = 0;
    if cfg.stabilizer.method == StabilizerMethod::StiffnessReg && cfg.stabilizer.lambda_reg > 0.0 {
        let (p, stats) = stiffness_penalty(&mut tape, &bound, &fwd.states, &batch.plan)?;
        let scaled = tape.scale(p, cfg.stabilizer.lambda_reg);
        penalty = tape.value(scaled).item();
        fallbacks = stats.fallbacks;
        objective = tape.add(objective, scaled)?;
    }
    let objective_value = tape.value(objective).item();
    let loss = terms.breakdown(&tape);
    tape.backward(objective)?;
    let mut grads = model.params().grads(&tape, &bound.vars);
    let (pre, post) = if cfg.stabilizer.method == StabilizerMethod::GradClip {
        let r = clip_gradients(&mut grads, cfg.stabilizer.clip_norm);
        (r.pre_norm, r.post_norm)
    } else {
        let n = grads.iter().map(|g| g.norm2().powi(2)).sum::<f64>().sqrt();
        (n, n)
    };
    Ok((
        grads,
        StepOutcome {
            loss,
            penalty,
            objective: objective_value,
            pre_clip_norm: pre,
            grad_norm: post,
            stiffness_fallbacks: fallbacks,
        },
    ))
}

/// Trains an autoencoder from `seed` and selects checkpoints with `criteria`.
pub fn train_autoencoder(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    criteria: &StopCriteria,
    train: &[&Trajectory],
    val: &[&Trajectory],
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    criteria.validate().map_err(TrainError::Config)?;
    if train.len() < 2 || val.len() < 2 {
        return Err(TrainError::Config("need at least 2 train and 2 validation trajectories".into()));
    }
    let solver = cfg.effective_solver();
    let prep = |ts: &[&Trajectory]| ts.iter().map(|t| prepare(t, solver.dt)).collect::<Result<Vec<_>, _>>();
    let train_p = prep(train)?;
    let val_p = prep(val)?;

    let mut model = CdeAutoencoder::new(model_cfg.clone(), seed)?;
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..train_p.len()).collect();
    let mut subsample = order.clone();
    subsample.shuffle(&mut rng);
    subsample.truncate(cfg.rho_subsample);
    subsample.sort_unstable();
    let rho_items: Vec<&Prepared> = subsample.iter().map(|&i| &train_p[i]).collect();
    let val_items: Vec<&Prepared> = val_p.iter().collect();

    let mut record = TrainRecord::new(if cfg.lambda_per_score.is_some() { None } else { Some(cfg.lambda) });
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4]; // mse, corr, total, penalty
        let mut weight = 0usize;
        let mut grad_norm: f64 = 0.0;
        let mut failed = 0usize;
        let mut fallbacks = 0usize;
        let mut last_failure = String::new();
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for idx in &batches {
            let items: Vec<&Prepared> = idx.iter().map(|&i| &train_p[i]).collect();
            let batch = Batch::new(&items)?;
            let step = batch_gradient(&model, &batch, cfg).and_then(|(grads, out)| {
                if !out.objective.is_finite() || !grads.iter().all(Array::all_finite) {
                    return Err(ModelError::Config("non-finite loss or gradient".into()));
                }
                if !opt.step(model.params_mut(), &grads) {
                    return Err(ModelError::Config("optimizer update would be non-finite".into()));
                }
                Ok(out)
            });
            match step {
                Ok(out) => {
                    let w = idx.len();
                    weight += w;
                    sums[0] += w as f64 * out.loss.mse;
                    sums[1] += w as f64 * out.loss.corr;
                    sums[2] += w as f64 * out.loss.total;
                    sums[3] += w as f64 * out.penalty;
                    grad_norm = grad_norm.max(out.grad_norm);
                    fallbacks += out.stiffness_fallbacks;
                }
                Err(e) => {
                    failed += 1;
                    log::warn!("epoch {epoch}: skipping batch: {e}");
                    last_failure = e.to_string();
                }
            }
        }
        if failed as f64 > cfg.max_failed_fraction * batches.len() as f64 || weight == 0 {
            return Err(TrainError::Diverged {
                epoch,
                skipped: failed,
                batches: batches.len(),
                limit: 100.0 * cfg.max_failed_fraction,
                last: last_failure,
            });
        }
        if fallbacks > 0 {
            log::info!("epoch {epoch}: {fallbacks} stiffness scores used the Frobenius fallback");
        }
        let w = weight as f64;
        let (mse, corr) = (sums[0] / w, sums[1] / w);
        let total = if cfg.lambda_per_score.is_some() { sums[2] / w } else { mse + cfg.lambda * corr };
        let val_loss = evaluate_loss(&model, &val_items, &solver, cfg.eval_batch_size, cfg.lambdas())?;
        if !val_loss.total.is_finite() {
            return Err(TrainError::NonFiniteValidation(epoch));
        }
        let rho = evaluate_loss(&model, &rho_items, &solver, cfg.eval_batch_size, cfg.lambdas())?.mean_rho();
        log::info!(
            "epoch {epoch}: total {total:.5} mse {mse:.5} corr {corr:.4} val {:.5} rho {rho:.3} |g| {grad_norm:.3}",
            val_loss.total
        );
        record.push(EpochRecord {
            epoch,
            total,
            mse,
            corr,
            val: val_loss.total,
            rho,
            grad_norm,
            penalty: sums[3] / w,
            checkpoint: None,
        });
        snapshots.push(model.params().clone());
    }
    let selection = select_checkpoints(&record, criteria);
    let flat = flatness(&record.totals(), criteria.eps2).ok();
    Ok(TrainOutcome {
        model_config: model_cfg.clone(),
        record,
        snapshots,
        selection,
        flatness: flat,
    })
}
