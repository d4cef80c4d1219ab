//! Runs generate, train, rl and analyze with the smoke configuration and
//! prints where everything went.
//!
//! cargo run --release --example full_pipeline -- [out_dir]

use std::path::PathBuf;

use stable_cde::cli::{cmd_analyze, cmd_generate, cmd_rl, cmd_train, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/example".into()));
    let cfg = ExperimentConfig { out_dir: out.clone(), ..ExperimentConfig::smoke() };

    let cohort = cmd_generate(&cfg, true)?;
    println!("cohort: {} patients, mortality {:.2}%, splits {:?}", cohort.n, 100.0 * cohort.mortality, cohort.split_sizes);
    for t in cmd_train(&cfg, true)? {
        match (&t.checkpoints, &t.selection_failure) {
            (Some(c), _) => println!("seed {}: stable epoch {}, overtrained epoch {}", t.seed, c.optimal_stable, c.overtrained_unstable),
            (None, why) => println!("seed {}: no stable checkpoint ({})", t.seed, why.as_deref().unwrap_or("?")),
        }
    }
    for r in cmd_rl(&cfg, true)? {
        println!("seed {} {:<20} WIS {:+.4} (ESS {:.1})", r.seed, r.checkpoint, r.final_wis, r.effective_sample_size);
    }
    let a = cmd_analyze(&cfg)?;
    println!("analysis: {} files under {}", a.files.len(), out.join("analysis").display());
    for s in a.skipped {
        println!("skipped: {s}");
    }
    Ok(())
}
