use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pca::LatentProjection;
use super::svg::{ramp, Chart, DIED, SURVIVED};
use super::AnalysisError;
use crate::cohort::Trajectory;
use crate::diffcore::Array;
use crate::model::acuity_correlation_value;

pub const SCORE_NAMES: [&str; 3] = ["sofa", "sapsii", "oasis"];
const HIST_BINS: usize = 20;

/// Writes every file through a temporary name and renames it into place, so
/// a reader never sees a half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), AnalysisError> {
    let name = path
        .file_name()
        .ok_or_else(|| AnalysisError::Io(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| AnalysisError::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| AnalysisError::Io(format!("{}: {e}", path.display())))
}

fn csv_bytes<S: Serialize>(rows: &[S]) -> Result<Vec<u8>, AnalysisError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| AnalysisError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| AnalysisError::Io(e.to_string()))
}

/// Header-only CSV for an empty table (serde cannot infer it without a row).
fn csv_or_header<S: Serialize>(rows: &[S], header: &str) -> Result<Vec<u8>, AnalysisError> {
    if rows.is_empty() {
        Ok(format!("{header}\n").into_bytes())
    } else {
        csv_bytes(rows)
    }
}

#[derive(Debug, Serialize)]
struct ScatterRow {
    patient_id: u64,
    step: usize,
    pc1: f64,
    pc2: f64,
    score: f64,
}

#[derive(Debug, Serialize)]
struct OverlayRow {
    patient_id: u64,
    died: bool,
    pc1_first: f64,
    pc2_first: f64,
    pc1_last: f64,
    pc2_last: f64,
}

#[derive(Debug, Serialize)]
struct HistRow {
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
}

/// Mean over the three scores of the mean |ρ| between each latent dimension
/// and the score along one trajectory.
pub fn trajectory_correlation(latents: &Array, traj: &Trajectory) -> Result<f64, AnalysisError> {
    let mut total = 0.0;
    for k in 0..3 {
        let scores: Vec<f64> = traj.acuity.iter().map(|a| a.as_array()[k]).collect();
        total += acuity_correlation_value(latents, &scores)
            .map_err(|e| AnalysisError::Misaligned(format!("trajectory {}: {e}", traj.patient_id)))?;
    }
    Ok(total / 3.0)
}

/// Equal-width counts over `[0, 1]`; values are clamped into range.
pub fn histogram_unit(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let i = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

/// Emits the acuity-colored latent scatters (one per score), the
/// first-to-last latent jump overlay colored by outcome, and the histogram of
/// per-trajectory latent/acuity correlation, each as CSV plus SVG.
///
/// `projection.projected` holds the stacked per-timestep projections of
/// `latents`, in trajectory order. Nothing is written unless every input
/// checks out.
pub fn export_figures(
    projection: &LatentProjection,
    trajectories: &[&Trajectory],
    latents: &[Array],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, AnalysisError> {
    if trajectories.is_empty() {
        return Err(AnalysisError::Empty("validation set".into()));
    }
    if latents.len() != trajectories.len() {
        return Err(AnalysisError::Misaligned(format!(
            "{} latent blocks for {} trajectories",
            latents.len(),
            trajectories.len()
        )));
    }
    let proj = &projection.projected;
    let mut offsets = Vec::with_capacity(trajectories.len());
    let mut row = 0;
    for (t, lat) in trajectories.iter().zip(latents) {
        if lat.rows() != t.len() || t.acuity.len() != t.len() {
            return Err(AnalysisError::Misaligned(format!(
                "trajectory {}: {} latent rows, {} acuity rows, {} timesteps",
                t.patient_id,
                lat.rows(),
                t.acuity.len(),
                t.len()
            )));
        }
        if row + t.len() > proj.rows() {
            return Err(AnalysisError::Misaligned(format!(
                "trajectory {}: projection has only {} rows",
                t.patient_id,
                proj.rows()
            )));
        }
        offsets.push(row);
        row += t.len();
    }
    if row != proj.rows() {
        return Err(AnalysisError::Misaligned(format!("projection has {} rows, trajectories have {row} timesteps", proj.rows())));
    }

    let col = |k: usize| (0..proj.rows()).map(move |r| proj.get2(r, k));
    let range = |it: &mut dyn Iterator<Item = f64>| {
        it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let xr = range(&mut col(0));
    let yr = range(&mut col(1));
    let axis = |k: usize| format!("PC{} ({:.3})", k + 1, projection.explained_variance[k]);

    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for (k, name) in SCORE_NAMES.iter().enumerate() {
        let mut rows = Vec::with_capacity(proj.rows());
        for (t, &off) in trajectories.iter().zip(&offsets) {
            for (step, a) in t.acuity.iter().enumerate() {
                rows.push(ScatterRow {
                    patient_id: t.patient_id,
                    step,
                    pc1: proj.get2(off + step, 0),
                    pc2: proj.get2(off + step, 1),
                    score: a.as_array()[k],
                });
            }
        }
        let (lo, hi) = range(&mut rows.iter().map(|r| r.score));
        let mut chart = Chart::new(xr, yr);
        for r in &rows {
            let t = if hi > lo { (r.score - lo) / (hi - lo) } else { 0.5 };
            chart.point(r.pc1, r.pc2, &ramp(t));
        }
        chart.colorbar(lo, hi);
        files.push((format!("pca_scatter_{name}.csv"), csv_bytes(&rows)?));
        let title = format!("Latent states colored by {}", name.to_uppercase());
        files.push((format!("pca_scatter_{name}.svg"), chart.render(&title, &axis(0), &axis(1)).into_bytes()));
    }

    let overlay: Vec<OverlayRow> = trajectories
        .iter()
        .zip(&offsets)
        .map(|(t, &off)| {
            let last = off + t.len() - 1;
            OverlayRow {
                patient_id: t.patient_id,
                died: t.outcome.died(),
                pc1_first: proj.get2(off, 0),
                pc2_first: proj.get2(off, 1),
                pc1_last: proj.get2(last, 0),
                pc2_last: proj.get2(last, 1),
            }
        })
        .collect();
    let mut chart = Chart::new(xr, yr);
    // survivors first so the rarer deaths stay visible on top
    for died in [false, true] {
        for r in overlay.iter().filter(|r| r.died == died) {
            chart.segment((r.pc1_first, r.pc2_first), (r.pc1_last, r.pc2_last), if died { DIED } else { SURVIVED });
        }
    }
    chart.legend(&[("survived", SURVIVED), ("died", DIED)]);
    files.push(("mortality_overlay.csv".into(), csv_bytes(&overlay)?));
    files.push(("mortality_overlay.svg".into(), chart.render("First-to-last latent jump", &axis(0), &axis(1)).into_bytes()));

    let values = trajectories
        .iter()
        .zip(latents)
        .map(|(t, l)| trajectory_correlation(l, t))
        .collect::<Result<Vec<_>, _>>()?;
    let counts = histogram_unit(&values, HIST_BINS);
    let width = 1.0 / HIST_BINS as f64;
    let hist: Vec<HistRow> = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistRow { bin_lo: i as f64 * width, bin_hi: (i + 1) as f64 * width, count })
        .collect();
    let peak = counts.iter().copied().max().unwrap_or(0) as f64;
    let mut chart = Chart::exact((0.0, 1.0), (0.0, peak * 1.05));
    for r in &hist {
        chart.bar(r.bin_lo, r.bin_hi, r.count as f64, SURVIVED);
    }
    files.push(("corr_histogram.csv".into(), csv_bytes(&hist)?));
    files.push((
        "corr_histogram.svg".into(),
        chart.render("Per-trajectory latent/acuity correlation", "mean |ρ|", "trajectories").into_bytes(),
    ));

    fs::create_dir_all(out_dir).map_err(|e| AnalysisError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// One row of `flatness.csv`. `wis` is empty when no policy was evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessRow {
    pub method: String,
    pub seed: u64,
    pub plateau_length: usize,
    #[serde(rename = "S1")]
    pub s1: f64,
    pub wis: Option<f64>,
}

pub fn write_flatness_csv(path: &Path, rows: &[FlatnessRow]) -> Result<(), AnalysisError> {
    write_atomic(path, &csv_or_header(rows, "method,seed,plateau_length,S1,wis")?)
}

/// One row of `loss_correlation.csv`: a named pair of series from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub seed: u64,
    pub pair: String,
    pub n: usize,
    pub pearson_r: Option<f64>,
    pub p_value: Option<f64>,
    pub mutual_information_nats: Option<f64>,
    pub mi_excess_nats: Option<f64>,
}

pub fn write_correlation_csv(path: &Path, rows: &[CorrelationRow]) -> Result<(), AnalysisError> {
    write_atomic(
        path,
        &csv_or_header(rows, "seed,pair,n,pearson_r,p_value,mutual_information_nats,mi_excess_nats")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::pca_project;
    use crate::cohort::{generate_cohort, CohortParams};

    fn fixture(n: usize) -> (Vec<Trajectory>, Vec<Array>) {
        let mut trajs = generate_cohort(n.max(10), 4, &CohortParams::default()).unwrap();
        trajs.truncate(n);
        // latents that track the acuity scores with a per-trajectory twist
        let latents = trajs
            .iter()
            .map(|t| {
                let data = t
                    .acuity
                    .iter()
                    .enumerate()
                    .flat_map(|(k, a)| [a.sofa, a.sapsii * 0.1 + k as f64, (t.patient_id % 3) as f64])
                    .collect();
                Array::matrix(t.len(), 3, data).unwrap()
            })
            .collect();
        (trajs, latents)
    }

    fn stacked(latents: &[Array]) -> Array {
        let rows: usize = latents.iter().map(|l| l.rows()).sum();
        let data = latents.iter().flat_map(|l| l.data().to_vec()).collect();
        Array::matrix(rows, latents[0].cols(), data).unwrap()
    }

    #[test]
    fn smoke_set_emits_the_documented_files() {
        let (trajs, latents) = fixture(10);
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let proj = pca_project(&stacked(&latents)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_figures(&proj, &refs, &latents, dir.path()).unwrap();
        let svgs = files.iter().filter(|p| p.extension().unwrap() == "svg").count();
        assert_eq!(files.len(), 10);
        assert_eq!(svgs, 5);
        let scatters = files.iter().filter(|p| p.to_string_lossy().contains("pca_scatter_") && p.extension().unwrap() == "svg");
        assert_eq!(scatters.count(), 3);

        let mut rdr = csv::Reader::from_path(dir.path().join("corr_histogram.csv")).unwrap();
        let total: usize = rdr.records().map(|r| r.unwrap()[2].parse::<usize>().unwrap()).sum();
        assert_eq!(total, 10);
        // no temporary files left behind
        assert!(fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with('.')));
    }

    #[test]
    fn empty_set_writes_nothing() {
        let (trajs, latents) = fixture(5);
        let proj = pca_project(&stacked(&latents)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("figs");
        assert!(matches!(export_figures(&proj, &[], &[], &out), Err(AnalysisError::Empty(_))));
        assert!(!out.exists());
        drop(trajs);
    }

    #[test]
    fn misalignment_names_the_trajectory() {
        let (trajs, mut latents) = fixture(4);
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let proj = pca_project(&stacked(&latents)).unwrap();
        let bad = &latents[2];
        latents[2] = Array::matrix(bad.rows() - 1, 3, bad.data()[3..].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = export_figures(&proj, &refs, &latents, dir.path()).unwrap_err().to_string();
        assert!(err.contains(&trajs[2].patient_id.to_string()), "{err}");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn flatness_csv_leaves_missing_wis_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flatness.csv");
        let rows = vec![
            FlatnessRow { method: "none".into(), seed: 1, plateau_length: 12, s1: 0.01, wis: Some(0.5) },
            FlatnessRow { method: "grad_clip".into(), seed: 1, plateau_length: 3, s1: 0.2, wis: None },
        ];
        write_flatness_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "method,seed,plateau_length,S1,wis\nnone,1,12,0.01,0.5\ngrad_clip,1,3,0.2,\n");
        let back: Vec<FlatnessRow> = csv::Reader::from_path(&path).unwrap().deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(back, rows);
    }

    #[test]
    fn histogram_conserves_counts() {
        let v = [0.0, 0.05, 0.999, 1.0, 1.2, -0.1, 0.5];
        let c = histogram_unit(&v, 20);
        assert_eq!(c.iter().sum::<usize>(), v.len());
        assert_eq!(c[0], 2);
        assert_eq!(c[19], 3);
    }
}
