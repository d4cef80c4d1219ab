//! Runs the three-criterion stopping rule on a hand-made training record:
//! loss decays, plateaus, then validation drifts upward while training keeps
//! improving slightly.
//!
//! cargo run --example early_stopping

use stable_cde::earlystop::{select_checkpoints, stopping_report, EpochRecord, StopCriteria, TrainRecord};
use stable_cde::stabilize::flatness;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut record = TrainRecord::new(Some(1.0));
    for e in 0..150 {
        let x = e as f64;
        let total = 0.2 + (-x / 12.0).exp() - 0.0002 * (x - 80.0).max(0.0);
        let val = total + 0.004 * (x - 90.0).max(0.0);
        record.push(EpochRecord {
            epoch: e,
            total,
            mse: total,
            val,
            rho: 0.9 * (1.0 - (-x / 25.0).exp()),
            ..Default::default()
        });
    }

    let criteria = StopCriteria::default();
    let selection = select_checkpoints(&record, &criteria);
    print!("{}", stopping_report(&record, &criteria, &selection, &[]));

    let plateau = flatness(&record.totals(), criteria.eps2)?;
    println!(
        "plateau: epochs {:?} (length {}), mean |dL| {:.2e}",
        plateau.epochs(),
        plateau.plateau_length,
        plateau.mean_abs_slope
    );
    Ok(())
}
