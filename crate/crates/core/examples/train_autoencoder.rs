//! Trains a small CDE autoencoder on a synthetic cohort and prints the
//! per-epoch record and the selected checkpoints.
//!
//! cargo run --release --example train_autoencoder -- [n_patients] [epochs]

use std::time::Instant;

use stable_cde::cde::SolverConfig;
use stable_cde::cohort::{generate_cohort, split_cohort, CohortParams, SplitRatios};
use stable_cde::earlystop::StopCriteria;
use stable_cde::model::ModelConfig;
use stable_cde::train::{train_autoencoder, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(400);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);

    let cohort = generate_cohort(n, 7, &CohortParams::default())?;
    let split = split_cohort(&cohort, SplitRatios::default(), 7)?;
    let train = split.select(&split.train, &cohort);
    let val = split.select(&split.val, &cohort);

    let model = ModelConfig {
        hidden_size: 16,
        field_widths: vec![32, 32],
        decoder_width: 32,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs,
        learning_rate: 2e-3,
        solver: SolverConfig::rk4(4.0),
        ..TrainConfig::default()
    };
    let criteria = StopCriteria { p: (epochs / 4).max(1), ..StopCriteria::default() };
    let start = Instant::now();
    let out = train_autoencoder(&model, &cfg, &criteria, &train, &val, 25)?;
    println!("epoch  total      mse       corr      val       rho");
    for e in &out.record.epochs {
        println!(
            "{:>5}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:.3}",
            e.epoch, e.total, e.mse, e.corr, e.val, e.rho
        );
    }
    println!("trained {} epochs in {:.1?}", epochs, start.elapsed());
    match &out.selection {
        Ok(cp) => println!("optimal_stable={} overtrained_unstable={}", cp.optimal_stable, cp.overtrained_unstable),
        Err(e) => println!("{e}"),
    }
    Ok(())
}
