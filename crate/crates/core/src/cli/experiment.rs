//! The pipeline behind each subcommand. Every command reads the artifacts of
//! the previous one from the run directory:
//!
//! ```text
//! <out>/config.toml, manifest.json
//! <out>/cohort/{train,val,test}.csv, split.json, summary.json
//! <out>/seed_<s>/train_record.json, train_summary.json, stopping_report.txt
//! <out>/seed_<s>/{optimal_stable,overtrained_unstable,final}.ckpt
//! <out>/seed_<s>/rl/<checkpoint>/{policy.bin,wis.csv,summary.json}
//! <out>/analysis/...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::{hash_files, record_command, sha256_hex, CommandEntry};
use super::ExperimentError;
use crate::analysis::{
    export_figures, loss_correlation, pca_project, train_val_correlation, write_atomic, write_correlation_csv,
    write_flatness_csv, CorrelationRow, FlatnessRow,
};
use crate::cohort::{
    generate_cohort_detailed, mortality_rate, read_cohort_csv, split_cohort, write_cohort_csv, CohortSplit,
    Trajectory, N_ACTIONS,
};
use crate::diffcore::Array;
use crate::earlystop::{stopping_report, Checkpoints, TrainRecord};
use crate::model::checkpoint::{load_autoencoder, save_autoencoder, CheckpointMeta};
use crate::model::{prepare, CdeAutoencoder, ModelError, Prepared};
use crate::rl::{encode_latents, run_offline_rl, save_policy, RlError};
use crate::stabilize::{flatness, FlatnessReport, StabilizerMethod};
use crate::train::{evaluate_loss, train_autoencoder, TrainError};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const CHECKPOINTS: [&str; 2] = ["optimal_stable", "overtrained_unstable"];

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }
    pub fn cohort_dir(&self) -> PathBuf {
        self.root.join("cohort")
    }
    pub fn cohort_csv(&self, split: &str) -> PathBuf {
        self.cohort_dir().join(format!("{split}.csv"))
    }
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }
    pub fn record(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("train_record.json")
    }
    pub fn train_summary(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("train_summary.json")
    }
    pub fn checkpoint(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join(format!("{name}.ckpt"))
    }
    pub fn rl_dir(&self, seed: u64, checkpoint: &str) -> PathBuf {
        self.seed_dir(seed).join("rl").join(checkpoint)
    }
    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_atomic(path, bytes).map_err(|e| ExperimentError::Data(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).expect("summaries serialize");
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))
}

fn refuse_existing(path: &Path, force: bool) -> Result<(), ExperimentError> {
    if path.exists() && !force {
        return Err(ExperimentError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn finish(
    layout: &RunLayout,
    cfg: &ExperimentConfig,
    command: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<(), ExperimentError> {
    let text = cfg.to_toml();
    write_file(&layout.root.join("config.toml"), text.as_bytes())?;
    let entry = CommandEntry {
        config_sha256: sha256_hex(text.as_bytes()),
        config: text,
        seeds: cfg.seeds.clone(),
        inputs: hash_files(&layout.root, inputs)?,
        outputs: hash_files(&layout.root, outputs)?,
    };
    record_command(&layout.root, command, entry)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n: usize,
    pub seed: u64,
    pub mortality: f64,
    /// Train, validation and test.
    pub split_sizes: [usize; 3],
    pub split_mortality: [f64; 3],
    pub death_threshold: Option<f64>,
}

pub fn cmd_generate(cfg: &ExperimentConfig, force: bool) -> Result<CohortSummary, ExperimentError> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.out_dir);
    refuse_existing(&layout.cohort_dir(), force)?;
    let c = &cfg.cohort;
    let cohort = generate_cohort_detailed(c.n, c.seed, &c.params).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let all = &cohort.trajectories;
    let split = split_cohort(all, c.ratios, c.seed).map_err(|e| ExperimentError::Config(e.to_string()))?;

    fs::create_dir_all(layout.cohort_dir()).map_err(|e| io_err(&layout.cohort_dir(), e))?;
    let mut outputs = Vec::new();
    let parts = [&split.train, &split.val, &split.test];
    for (name, ids) in SPLITS.iter().zip(parts) {
        let path = layout.cohort_csv(name);
        write_cohort_csv(split.select(ids, all), &path).map_err(|e| io_err(&path, e))?;
        outputs.push(path);
    }
    let summary = CohortSummary {
        n: all.len(),
        seed: c.seed,
        mortality: mortality_rate(all),
        split_sizes: parts.map(|p| p.len()),
        split_mortality: split.mortality,
        death_threshold: cohort.death_threshold,
    };
    for (name, value) in [
        ("split.json", serde_json::to_value(&split).expect("split serializes")),
        ("summary.json", serde_json::to_value(&summary).expect("summary serializes")),
    ] {
        let path = layout.cohort_dir().join(name);
        write_json(&path, &value)?;
        outputs.push(path);
    }
    log::info!(
        "cohort: {} patients, mortality {:.3}, splits {:?}",
        summary.n,
        summary.mortality,
        summary.split_sizes
    );
    finish(&layout, cfg, "generate", &[], &outputs)?;
    Ok(summary)
}

fn load_split(layout: &RunLayout, split: &str) -> Result<Vec<Trajectory>, ExperimentError> {
    let path = layout.cohort_csv(split);
    if !path.exists() {
        return Err(ExperimentError::Data(format!(
            "{} is missing; run `generate` first",
            path.display()
        )));
    }
    read_cohort_csv(&path).map_err(|e| io_err(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub stabilizer: StabilizerMethod,
    pub epochs: usize,
    pub checkpoints: Option<Checkpoints>,
    /// Why no stable checkpoint was selected.
    pub selection_failure: Option<String>,
    pub flatness: Option<FlatnessReport>,
    pub max_grad_norm: f64,
}

fn train_error(seed: u64, e: TrainError) -> ExperimentError {
    match e {
        TrainError::Config(m) => ExperimentError::Config(m),
        e @ (TrainError::Diverged { .. } | TrainError::NonFiniteValidation(_)) => {
            ExperimentError::Numerical(format!("seed {seed}: {e}"))
        }
        TrainError::Model(m) => ExperimentError::Data(format!("seed {seed}: {m}")),
    }
}

fn model_error(e: ModelError) -> ExperimentError {
    match e {
        ModelError::Config(m) => ExperimentError::Config(m),
        e => ExperimentError::Data(e.to_string()),
    }
}

/// Runs `job` for every seed, `workers` at a time, and returns the results in
/// seed order.
fn per_seed<T: Send>(
    seeds: &[u64],
    workers: usize,
    job: impl Fn(u64) -> Result<T, ExperimentError> + Sync,
) -> Result<Vec<T>, ExperimentError> {
    let workers = match workers {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        w => w,
    };
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(workers.max(1)) {
        if chunk.len() == 1 {
            out.push(job(chunk[0])?);
            continue;
        }
        let results: Vec<_> = std::thread::scope(|s| {
            let job = &job;
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || job(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn validation_breakdown(
    cfg: &ExperimentConfig,
    model: &CdeAutoencoder,
    val: &[&Trajectory],
) -> Result<crate::model::LossBreakdown, ExperimentError> {
    let solver = cfg.train.effective_solver();
    let prepared: Vec<Prepared> = val.iter().map(|t| prepare(t, solver.dt)).collect::<Result<_, _>>().map_err(model_error)?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    evaluate_loss(model, &refs, &solver, cfg.train.eval_batch_size, cfg.train.lambdas()).map_err(model_error)
}

fn train_seed(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    train: &[&Trajectory],
    val: &[&Trajectory],
    seed: u64,
) -> Result<(TrainSummary, Vec<PathBuf>), ExperimentError> {
    log::info!("seed {seed}: training with stabilizer {}", cfg.train.stabilizer.method);
    let out = train_autoencoder(&cfg.model, &cfg.train, &cfg.stop, train, val, seed).map_err(|e| train_error(seed, e))?;
    let dir = layout.seed_dir(seed);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut record = out.record.clone();
    let mut outputs = Vec::new();
    let run_config = serde_json::to_value(cfg).expect("config serializes");

    let last = record.len() - 1;
    let mut named: Vec<(&str, usize)> = vec![("final", last)];
    if let Ok(cp) = &out.selection {
        named.push((CHECKPOINTS[0], cp.optimal_stable));
        named.push((CHECKPOINTS[1], cp.overtrained_unstable));
    }
    let mut paths = Vec::new();
    for &(name, epoch) in &named {
        let model = out.model_at(epoch).map_err(model_error)?;
        let meta = CheckpointMeta {
            model: cfg.model.clone(),
            epoch,
            loss: validation_breakdown(cfg, &model, val)?,
            run_config: run_config.clone(),
        };
        let path = layout.checkpoint(seed, name);
        save_autoencoder(&path, &model, &meta).map_err(|e| io_err(&path, e))?;
        record.epochs[epoch].checkpoint = Some(format!("{name}.ckpt"));
        paths.push((name, path.display().to_string()));
        outputs.push(path);
    }
    // stale checkpoints from an earlier run would be mistaken for this one's
    if out.selection.is_err() {
        for name in CHECKPOINTS {
            let _ = fs::remove_file(layout.checkpoint(seed, name));
        }
    }

    let summary = TrainSummary {
        seed,
        stabilizer: cfg.train.stabilizer.method,
        epochs: record.len(),
        checkpoints: out.selection.as_ref().ok().copied(),
        selection_failure: out.selection.as_ref().err().map(|e| e.to_string()),
        flatness: out.flatness,
        max_grad_norm: record.epochs.iter().map(|e| e.grad_norm).fold(0.0, f64::max),
    };
    if let Some(why) = &summary.selection_failure {
        log::warn!("seed {seed}: {why}");
    }
    let report = stopping_report(
        &record,
        &cfg.stop,
        &out.selection,
        &paths.iter().map(|(n, p)| (*n, p.clone())).collect::<Vec<_>>(),
    );
    let report_path = dir.join("stopping_report.txt");
    write_file(&report_path, report.as_bytes())?;
    write_json(&layout.record(seed), &record)?;
    write_json(&layout.train_summary(seed), &summary)?;
    outputs.extend([report_path, layout.record(seed), layout.train_summary(seed)]);
    Ok((summary, outputs))
}

pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<Vec<TrainSummary>, ExperimentError> {
    cfg.validate()?;
    for off in cfg.stabilizer_off_grid() {
        log::warn!("{off}");
    }
    let layout = RunLayout::new(&cfg.out_dir);
    for &seed in &cfg.seeds {
        refuse_existing(&layout.record(seed), force)?;
    }
    let train = load_split(&layout, "train")?;
    let val = load_split(&layout, "val")?;
    let (tr, va): (Vec<&Trajectory>, Vec<&Trajectory>) = (train.iter().collect(), val.iter().collect());
    let results = per_seed(&cfg.seeds, cfg.workers, |seed| train_seed(cfg, &layout, &tr, &va, seed))?;
    let inputs = vec![layout.cohort_csv("train"), layout.cohort_csv("val")];
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    for (s, files) in results {
        summaries.push(s);
        outputs.extend(files);
    }
    finish(&layout, cfg, "train", &inputs, &outputs)?;
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlSummary {
    pub seed: u64,
    pub checkpoint: String,
    pub epoch: usize,
    pub final_wis: f64,
    pub effective_sample_size: f64,
    pub behavior_train_accuracy: f64,
    pub behavior_val_accuracy: Option<f64>,
    pub max_abs_q: f64,
}

fn rl_error(e: RlError) -> ExperimentError {
    match e {
        RlError::Config(m) => ExperimentError::Config(m),
        e @ RlError::Divergence(_) => ExperimentError::Numerical(e.to_string()),
        e => ExperimentError::Data(e.to_string()),
    }
}

/// Loads an encoder checkpoint and checks it against the configured model.
pub fn load_encoder(cfg: &ExperimentConfig, path: &Path) -> Result<(CdeAutoencoder, CheckpointMeta), ExperimentError> {
    let (model, meta) = load_autoencoder(path).map_err(|e| io_err(path, e))?;
    if meta.model.hidden_size != cfg.model.hidden_size {
        return Err(ExperimentError::Data(format!(
            "{}: checkpoint hidden size {} does not match configured {}",
            path.display(),
            meta.model.hidden_size,
            cfg.model.hidden_size
        )));
    }
    Ok((model, meta))
}

/// Behavior cloning, dBCQ and validation WIS on the latents of one encoder
/// checkpoint; writes the policy bundle, WIS series and a summary.
pub fn rl_on_checkpoint(
    cfg: &ExperimentConfig,
    layout: &RunLayout,
    seed: u64,
    name: &str,
    train: &[&Trajectory],
    val: &[&Trajectory],
) -> Result<(RlSummary, Vec<PathBuf>), ExperimentError> {
    let (model, meta) = load_encoder(cfg, &layout.checkpoint(seed, name))?;
    let solver = cfg.train.effective_solver();
    let bs = cfg.train.eval_batch_size;
    let tl = encode_latents(&model, train, &solver, bs).map_err(model_error)?;
    let vl = encode_latents(&model, val, &solver, bs).map_err(model_error)?;
    log::info!("seed {seed}: offline RL on the {name} encoder (epoch {})", meta.epoch);
    let out = run_offline_rl(&tl, &vl, N_ACTIONS, &cfg.rl, seed).map_err(rl_error)?;

    let dir = layout.rl_dir(seed, name);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let policy = dir.join("policy.bin");
    save_policy(&policy, &out.bundle).map_err(rl_error)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &out.wis_series {
        w.serialize(p).map_err(|e| io_err(&dir, e))?;
    }
    let wis_path = dir.join("wis.csv");
    let bytes = w.into_inner().map_err(|e| io_err(&dir, e))?;
    write_file(&wis_path, if bytes.is_empty() { b"step,wis,ess\n" } else { &bytes })?;
    let summary = RlSummary {
        seed,
        checkpoint: name.to_string(),
        epoch: meta.epoch,
        final_wis: out.final_wis.wis_return,
        effective_sample_size: out.final_wis.effective_sample_size,
        behavior_train_accuracy: out.behavior_report.train_accuracy,
        behavior_val_accuracy: out.behavior_report.val_accuracy,
        max_abs_q: out.dbcq_report.max_abs_q,
    };
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    log::info!("seed {seed}: {name} validation WIS {:.4} (ESS {:.1})", summary.final_wis, summary.effective_sample_size);
    Ok((summary, vec![policy, wis_path, summary_path, layout.checkpoint(seed, name)]))
}

pub fn cmd_rl(cfg: &ExperimentConfig, force: bool) -> Result<Vec<RlSummary>, ExperimentError> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.out_dir);
    let mut jobs: Vec<(u64, &str)> = Vec::new();
    for &seed in &cfg.seeds {
        for name in CHECKPOINTS {
            if layout.checkpoint(seed, name).exists() {
                refuse_existing(&layout.rl_dir(seed, name), force)?;
                jobs.push((seed, name));
            } else {
                log::warn!("seed {seed}: no {name} checkpoint; skipping its policy");
            }
        }
    }
    if jobs.is_empty() {
        return Err(ExperimentError::Data(format!(
            "no encoder checkpoints under {}; run `train` first",
            layout.root.display()
        )));
    }
    let train = load_split(&layout, "train")?;
    let val = load_split(&layout, "val")?;
    let (tr, va): (Vec<&Trajectory>, Vec<&Trajectory>) = (train.iter().collect(), val.iter().collect());
    let mut summaries = Vec::new();
    let mut outputs = Vec::new();
    let mut inputs = vec![layout.cohort_csv("train"), layout.cohort_csv("val")];
    for (seed, name) in jobs {
        let (s, mut files) = rl_on_checkpoint(cfg, &layout, seed, name, &tr, &va)?;
        inputs.push(files.pop().expect("checkpoint path"));
        summaries.push(s);
        outputs.extend(files);
    }
    write_rl_comparison(&layout, &summaries)?;
    outputs.push(layout.root.join("wis_comparison.csv"));
    finish(&layout, cfg, "rl", &inputs, &outputs)?;
    Ok(summaries)
}

fn write_rl_comparison(layout: &RunLayout, summaries: &[RlSummary]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "checkpoint", "epoch", "wis", "ess"]).map_err(|e| io_err(&layout.root, e))?;
    for s in summaries {
        w.write_record([
            s.seed.to_string(),
            s.checkpoint.clone(),
            s.epoch.to_string(),
            s.final_wis.to_string(),
            s.effective_sample_size.to_string(),
        ])
        .map_err(|e| io_err(&layout.root, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(&layout.root, e))?;
    write_file(&layout.root.join("wis_comparison.csv"), &bytes)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub seeds_analyzed: Vec<u64>,
    /// Analyses that could not run, with the reason.
    pub skipped: Vec<String>,
    pub files: Vec<String>,
}

fn correlation_rows(seed: u64, record: &TrainRecord, eps2: f64, skipped: &mut Vec<String>) -> Vec<CorrelationRow> {
    let mut rows = Vec::new();
    let n = record.len();
    match loss_correlation(&record.mses(), &record.corrs()) {
        Ok(r) => rows.push(CorrelationRow {
            seed,
            pair: "mse_vs_corr".into(),
            n,
            pearson_r: Some(r.pearson_r),
            p_value: Some(r.p_value),
            mutual_information_nats: Some(r.mutual_information_nats),
            mi_excess_nats: Some(r.mi_excess_nats),
        }),
        Err(e) => skipped.push(format!("seed {seed}: loss correlation: {e}")),
    }
    let plateau = match flatness(&record.totals(), eps2) {
        Ok(p) => p,
        Err(e) => {
            skipped.push(format!("seed {seed}: plateau: {e}"));
            return rows;
        }
    };
    match train_val_correlation(record, &plateau) {
        Ok(c) => {
            for (pair, r, len) in [("train_vs_val_all", c.r_all, n), ("train_vs_val_plateau", c.r_plateau, c.plateau_length)] {
                if r.is_none() {
                    skipped.push(format!("seed {seed}: {pair}: correlation undefined over {len} epochs"));
                }
                rows.push(CorrelationRow {
                    seed,
                    pair: pair.into(),
                    n: len,
                    pearson_r: r,
                    p_value: None,
                    mutual_information_nats: None,
                    mi_excess_nats: None,
                });
            }
        }
        Err(e) => skipped.push(format!("seed {seed}: train/val correlation: {e}")),
    }
    rows
}

fn stack(latents: &[Array]) -> Result<Array, ExperimentError> {
    let h = latents.first().map(|l| l.cols()).unwrap_or(0);
    let rows: usize = latents.iter().map(|l| l.rows()).sum();
    let data = latents.iter().flat_map(|l| l.data().iter().copied()).collect();
    Array::matrix(rows, h, data).map_err(|e| ExperimentError::Data(e.to_string()))
}

pub fn cmd_analyze(cfg: &ExperimentConfig) -> Result<AnalysisSummary, ExperimentError> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.out_dir);
    let dir = layout.analysis_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut summary = AnalysisSummary::default();
    let mut corr_rows = Vec::new();
    let mut flat_rows = Vec::new();
    let mut inputs = Vec::new();
    let mut figure_source: Option<(u64, PathBuf)> = None;

    for &seed in &cfg.seeds {
        let rec_path = layout.record(seed);
        if !rec_path.exists() {
            summary.skipped.push(format!("seed {seed}: no training record"));
            continue;
        }
        let record: TrainRecord = read_json(&rec_path)?;
        let ts: TrainSummary = read_json(&layout.train_summary(seed))?;
        inputs.extend([rec_path, layout.train_summary(seed)]);
        summary.seeds_analyzed.push(seed);
        corr_rows.extend(correlation_rows(seed, &record, cfg.stop.eps2, &mut summary.skipped));

        let rl_path = layout.rl_dir(seed, CHECKPOINTS[0]).join("summary.json");
        let wis = if rl_path.exists() {
            let s: RlSummary = read_json(&rl_path)?;
            inputs.push(rl_path);
            Some(s.final_wis)
        } else {
            summary.skipped.push(format!("seed {seed}: no {} policy; flatness row has no WIS", CHECKPOINTS[0]));
            None
        };
        match flatness(&record.totals(), cfg.stop.eps2) {
            Ok(f) => flat_rows.push(FlatnessRow {
                method: ts.stabilizer.name().to_string(),
                seed,
                plateau_length: f.plateau_length,
                s1: f.mean_abs_slope,
                wis,
            }),
            Err(e) => summary.skipped.push(format!("seed {seed}: flatness: {e}")),
        }
        if figure_source.is_none() {
            let stable = layout.checkpoint(seed, CHECKPOINTS[0]);
            if stable.exists() {
                figure_source = Some((seed, stable));
            }
        }
    }

    let corr_path = dir.join("loss_correlation.csv");
    write_correlation_csv(&corr_path, &corr_rows).map_err(|e| ExperimentError::Data(e.to_string()))?;
    let flat_path = dir.join("flatness.csv");
    write_flatness_csv(&flat_path, &flat_rows).map_err(|e| ExperimentError::Data(e.to_string()))?;
    let mut outputs = vec![corr_path, flat_path];

    match figure_source {
        None => summary.skipped.push(format!("figures: no {} checkpoint", CHECKPOINTS[0])),
        Some((seed, ckpt)) => {
            let val = load_split(&layout, "val")?;
            let refs: Vec<&Trajectory> = val.iter().collect();
            let (model, _) = load_encoder(cfg, &ckpt)?;
            let solver = cfg.train.effective_solver();
            let lat = encode_latents(&model, &refs, &solver, cfg.train.eval_batch_size).map_err(model_error)?;
            let blocks: Vec<Array> = lat.into_iter().map(|l| l.states).collect();
            let proj = pca_project(&stack(&blocks)?).map_err(|e| ExperimentError::Data(e.to_string()))?;
            let files = export_figures(&proj, &refs, &blocks, &dir).map_err(|e| ExperimentError::Data(e.to_string()))?;
            log::info!("figures from seed {seed}'s {} encoder", CHECKPOINTS[0]);
            inputs.extend([ckpt, layout.cohort_csv("val")]);
            outputs.extend(files);
        }
    }
    for s in &summary.skipped {
        log::warn!("analysis skipped: {s}");
    }
    summary.files = outputs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    outputs.push(summary_path);
    finish(&layout, cfg, "analyze", &inputs, &outputs)?;
    Ok(summary)
}

/// generate, train, rl and analyze in sequence.
pub fn cmd_all(cfg: &ExperimentConfig, force: bool) -> Result<AnalysisSummary, ExperimentError> {
    cfg.validate()?;
    let root = &cfg.out_dir;
    let non_empty = fs::read_dir(root).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(ExperimentError::Config(format!(
            "{} is not empty; pass --force to overwrite",
            root.display()
        )));
    }
    cmd_generate(cfg, force)?;
    let trained = cmd_train(cfg, force)?;
    if trained.iter().any(|t| t.checkpoints.is_some()) {
        cmd_rl(cfg, force)?;
    } else {
        log::warn!("no seed produced a stable checkpoint; skipping offline RL");
    }
    cmd_analyze(cfg)
}

/// Reads the cohort split written by `generate`.
pub fn read_split(layout: &RunLayout) -> Result<CohortSplit, ExperimentError> {
    read_json(&layout.cohort_dir().join("split.json"))
}
