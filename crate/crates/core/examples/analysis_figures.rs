//! Projects encoder latents onto two principal components and writes the
//! scatter, mortality overlay and correlation histogram as CSV and SVG.
//!
//! cargo run --release --example analysis_figures -- [out_dir]

use std::path::PathBuf;

use stable_cde::analysis::{export_figures, pca_project};
use stable_cde::cde::SolverConfig;
use stable_cde::cohort::{generate_cohort, split_cohort, CohortParams, SplitRatios};
use stable_cde::diffcore::Array;
use stable_cde::earlystop::StopCriteria;
use stable_cde::model::ModelConfig;
use stable_cde::train::{train_autoencoder, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "figures_example".into()));

    let cohort = generate_cohort(300, 7, &CohortParams::default())?;
    let split = split_cohort(&cohort, SplitRatios::default(), 7)?;
    let (train, val) = (split.select(&split.train, &cohort), split.select(&split.val, &cohort));
    let model_cfg = ModelConfig { hidden_size: 8, field_widths: vec![16, 16], decoder_width: 16, ..ModelConfig::default() };
    let solver = SolverConfig::rk4(4.0);
    let cfg = TrainConfig { epochs: 10, learning_rate: 1e-2, solver: solver.clone(), ..TrainConfig::default() };
    let out = train_autoencoder(&model_cfg, &cfg, &StopCriteria::default(), &train, &val, 25)?;
    let model = out.model_at(out.record.len() - 1)?;

    let latents: Vec<Array> = val.iter().map(|t| model.encode(t, &solver).map(|h| h.states)).collect::<Result<_, _>>()?;
    let rows: Vec<Vec<f64>> = latents.iter().flat_map(|l| (0..l.rows()).map(|r| l.row(r).to_vec())).collect();
    let projection = pca_project(&Array::from_rows(&rows)?)?;
    println!(
        "{} latent states, explained variance {:.3} / {:.3}",
        rows.len(),
        projection.explained_variance[0],
        projection.explained_variance[1]
    );

    std::fs::create_dir_all(&out_dir)?;
    for f in export_figures(&projection, &val, &latents, &out_dir)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
