//! Generates a synthetic ICU cohort, splits it 70/15/15 stratified on
//! mortality and writes the three CSV files.
//!
//! cargo run --release --example generate_cohort -- [n_patients] [out_dir]

use std::path::PathBuf;

use stable_cde::cohort::{generate_cohort, split_cohort, write_cohort_csv, CohortParams, SplitRatios};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "cohort_example".into()));

    let cohort = generate_cohort(n, 7, &CohortParams::default())?;
    let deaths = cohort.iter().filter(|t| t.outcome.died()).count();
    let steps: usize = cohort.iter().map(|t| t.len()).sum();
    println!(
        "{n} patients, {steps} observations ({:.1} per stay), mortality {:.2}%",
        steps as f64 / n as f64,
        100.0 * deaths as f64 / n as f64
    );

    let split = split_cohort(&cohort, SplitRatios::default(), 7)?;
    std::fs::create_dir_all(&out)?;
    for (name, ids, m) in [("train", &split.train, split.mortality[0]), ("val", &split.val, split.mortality[1]), ("test", &split.test, split.mortality[2])] {
        let path = out.join(format!("{name}.csv"));
        write_cohort_csv(split.select(ids, &cohort), &path)?;
        println!("{name:<5} {:>5} patients, mortality {:.2}% -> {}", ids.len(), 100.0 * m, path.display());
    }
    Ok(())
}
