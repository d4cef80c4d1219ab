use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, DiffError, Tape, Var};

use super::{Batch, Forward};

/// Mean over latent dimensions of `|pearson(latent_j, scores)|`. Dimensions
/// (or scores) without spread contribute 0.
pub fn acuity_correlation(tape: &mut Tape, latents: Var, scores: &[f64]) -> Result<Var, DiffError> {
    let r = tape.column_pearson(latents, scores)?;
    let a = tape.abs(r);
    Ok(tape.mean(a))
}

pub fn acuity_correlation_value(latents: &Array, scores: &[f64]) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let x = tape.constant(latents.clone());
    let r = acuity_correlation(&mut tape, x, scores)?;
    Ok(tape.value(r).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    /// `-(ρ_sofa + ρ_sapsii + ρ_oasis)`
    pub corr: f64,
    pub total: f64,
    /// `[sofa, sapsii, oasis]`
    pub rho: [f64; 3],
}

impl LossBreakdown {
    pub fn mean_rho(&self) -> f64 {
        self.rho.iter().sum::<f64>() / 3.0
    }
}

pub struct LossTerms {
    pub mse: Var,
    pub rho: [Var; 3],
    pub corr: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            mse: tape.value(self.mse).item(),
            corr: tape.value(self.corr).item(),
            total: tape.value(self.total).item(),
            rho: self.rho.map(|r| tape.value(r).item()),
        }
    }
}

/// Reconstruction MSE plus the weighted acuity-correlation loss. With equal
/// weights this is exactly `mse + λ·corr`; the correlation term is recorded
/// even when every weight is zero.
pub fn loss_total(tape: &mut Tape, fwd: &Forward, batch: &Batch, lambdas: [f64; 3]) -> Result<LossTerms, DiffError> {
    let target = tape.constant(batch.targets.clone());
    let diff = tape.sub(fwd.recon, target)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean(sq);
    let rho = [
        acuity_correlation(tape, fwd.latents, &batch.scores[0])?,
        acuity_correlation(tape, fwd.latents, &batch.scores[1])?,
        acuity_correlation(tape, fwd.latents, &batch.scores[2])?,
    ];
    let s = tape.add(rho[0], rho[1])?;
    let s = tape.add(s, rho[2])?;
    let corr = tape.scale(s, -1.0);
    let reg = if lambdas[0] == lambdas[1] && lambdas[1] == lambdas[2] {
        tape.scale(corr, lambdas[0])
    } else {
        let mut acc = tape.scale(rho[0], -lambdas[0]);
        for k in 1..3 {
            let t = tape.scale(rho[k], -lambdas[k]);
            acc = tape.add(acc, t)?;
        }
        acc
    };
    let total = tape.add(mse, reg)?;
    Ok(LossTerms { mse, rho, corr, total })
}
