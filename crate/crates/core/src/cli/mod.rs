//! Command-line surface: configuration loading, overrides and the
//! generate / train / rl / analyze / all pipeline.

mod config;
mod experiment;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::{CohortSection, ExperimentConfig, DEFAULT_SEEDS};
pub use experiment::{
    cmd_all, cmd_analyze, cmd_generate, cmd_rl, cmd_train, load_encoder, read_split, rl_on_checkpoint,
    AnalysisSummary, CohortSummary, RlSummary, RunLayout, TrainSummary, CHECKPOINTS, SPLITS,
};
pub use manifest::{file_sha256, read_manifest, sha256_hex, CommandEntry, Manifest, MANIFEST_FILE};

use crate::stabilize::StabilizerMethod;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Data(_) => 3,
            ExperimentError::Numerical(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stable-cde", version, about = "Stabilized neural CDE representations for offline RL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training seed; repeat for several. With `generate` it seeds the cohort.
    #[arg(long = "seed", global = true)]
    pub seeds: Vec<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, value_parser = parse_stabilizer)]
    pub stabilizer: Option<StabilizerMethod>,
    /// Start from the small, fast defaults instead of the full-scale ones.
    #[arg(long, global = true)]
    pub smoke: bool,
    /// Cohort size.
    #[arg(long, global = true)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic cohort and its stratified split.
    Generate,
    /// Train the CDE autoencoder for every seed and select checkpoints.
    Train,
    /// Offline RL on the latents of each selected checkpoint.
    Rl,
    /// Loss correlations, flatness table and latent figures.
    Analyze,
    /// generate, train, rl and analyze.
    All,
}

fn parse_stabilizer(s: &str) -> Result<StabilizerMethod, String> {
    s.parse().map_err(|e: crate::stabilize::StabilizeError| e.to_string())
}

impl Cli {
    /// Defaults (full or smoke), then the config file, then flags.
    pub fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), self.smoke)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(m) = self.stabilizer {
            cfg.set_stabilizer(m);
        }
        if let Some(n) = self.n {
            cfg.cohort.n = n;
        }
        if !self.seeds.is_empty() {
            if self.command == Command::Generate {
                let [seed] = self.seeds[..] else {
                    return Err(ExperimentError::Config("generate takes a single --seed".into()));
                };
                cfg.cohort.seed = seed;
            } else {
                cfg.seeds = self.seeds.clone();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn execute(&self) -> Result<(), ExperimentError> {
        let cfg = self.resolve()?;
        match self.command {
            Command::Generate => cmd_generate(&cfg, self.force).map(drop),
            Command::Train => cmd_train(&cfg, self.force).map(drop),
            Command::Rl => cmd_rl(&cfg, self.force).map(drop),
            Command::Analyze => cmd_analyze(&cfg).map(drop),
            Command::All => cmd_all(&cfg, self.force).map(drop),
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match cli.execute() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
