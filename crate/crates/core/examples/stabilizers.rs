//! Trains the same small model with each stabilizer and compares the
//! flatness of the resulting training curves.
//!
//! cargo run --release --example stabilizers -- [n_patients] [epochs]

use stable_cde::cde::SolverConfig;
use stable_cde::cohort::{generate_cohort, split_cohort, CohortParams, SplitRatios};
use stable_cde::earlystop::StopCriteria;
use stable_cde::model::ModelConfig;
use stable_cde::stabilize::{flatness, StabilizerConfig, StabilizerMethod};
use stable_cde::train::{train_autoencoder, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(12);

    let cohort = generate_cohort(n, 7, &CohortParams::default())?;
    let split = split_cohort(&cohort, SplitRatios::default(), 7)?;
    let (train, val) = (split.select(&split.train, &cohort), split.select(&split.val, &cohort));
    let model = ModelConfig { hidden_size: 8, field_widths: vec![16, 16], decoder_width: 16, ..ModelConfig::default() };
    let criteria = StopCriteria { p: 5, eps2: 0.05, ..StopCriteria::default() };

    println!("{:<16} {:>10} {:>9} {:>10} {:>10}", "method", "final", "plateau", "S1", "max |g|");
    for method in [
        StabilizerMethod::None,
        StabilizerMethod::GradClip,
        StabilizerMethod::ImplicitAdams,
        StabilizerMethod::StiffnessReg,
    ] {
        let cfg = TrainConfig {
            epochs,
            learning_rate: 1e-2,
            solver: SolverConfig::rk4(4.0),
            stabilizer: StabilizerConfig { method, ..StabilizerConfig::default() },
            ..TrainConfig::default()
        };
        let out = train_autoencoder(&model, &cfg, &criteria, &train, &val, 25)?;
        let totals = out.record.totals();
        let f = flatness(&totals, criteria.eps2)?;
        let max_g = out.record.epochs.iter().map(|e| e.grad_norm).fold(0.0, f64::max);
        println!(
            "{:<16} {:>10.4} {:>9} {:>10.2e} {:>10.3}",
            method.name(),
            totals.last().copied().unwrap_or(f64::NAN),
            f.plateau_length,
            f.mean_abs_slope,
            max_g
        );
    }
    Ok(())
}
