use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::cde::SolverConfig;
use crate::cohort::{CohortParams, SplitRatios};
use crate::earlystop::StopCriteria;
use crate::model::ModelConfig;
use crate::rl::RlConfig;
use crate::stabilize::StabilizerMethod;
use crate::train::TrainConfig;

pub const DEFAULT_SEEDS: [u64; 4] = [25, 53, 1234, 2020];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub n: usize,
    /// Seeds the generator and the split; independent of the training seeds.
    pub seed: u64,
    pub ratios: SplitRatios,
    pub params: CohortParams,
}

impl Default for CohortSection {
    fn default() -> Self {
        CohortSection { n: 2000, seed: 7, ratios: SplitRatios::default(), params: CohortParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Seeds trained at once; 0 uses every available core.
    pub workers: usize,
    pub cohort: CohortSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stop: StopCriteria,
    pub rl: RlConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: DEFAULT_SEEDS.to_vec(),
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            cohort: CohortSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stop: StopCriteria::default(),
            rl: RlConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale settings that run the whole pipeline in a few minutes.
    pub fn smoke() -> Self {
        let mut c = ExperimentConfig { out_dir: PathBuf::from("runs/smoke"), ..Default::default() };
        c.seeds = vec![DEFAULT_SEEDS[0]];
        c.cohort.n = 200;
        c.model.hidden_size = 8;
        c.model.field_widths = vec![16, 16];
        c.model.decoder_width = 16;
        c.train.epochs = 15;
        c.train.learning_rate = 1e-2;
        c.train.solver = SolverConfig::rk4(4.0);
        // a 15-epoch run needs a short, looser plateau window to stop at all
        c.stop.p = 5;
        c.stop.eps2 = 0.05;
        c.rl.behavior.epochs = 10;
        c.rl.behavior.hidden = 32;
        c.rl.dbcq.steps = 5000;
        c.rl.dbcq.hidden = vec![32, 32];
        c.rl.dbcq.learning_rate = 1e-4;
        c.rl.dbcq.batch_size = 64;
        c.rl.eval_every = 1000;
        c
    }

    /// Layers a TOML document over `base`: keys present in the file win,
    /// everything else keeps the base value. Unknown keys are rejected.
    pub fn from_toml_over(base: &ExperimentConfig, text: &str) -> Result<Self, ExperimentError> {
        let overlay: toml::Table = text.parse().map_err(|e| ExperimentError::Config(format!("{e}")))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| ExperimentError::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        merged.try_into().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>, smoke: bool) -> Result<Self, ExperimentError> {
        let base = if smoke { Self::smoke() } else { Self::default() };
        match path {
            None => Ok(base),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ExperimentError::Config(format!("reading {}: {e}", p.display())))?;
                Self::from_toml_over(&base, &text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Settings outside the published tuning grids, worth a warning.
    pub fn stabilizer_off_grid(&self) -> Vec<String> {
        let mut out = self.train.stabilizer.off_grid();
        out.extend(self.stop.off_grid().into_iter().map(|f| format!("stop.{f} is outside its tuning grid")));
        out
    }

    pub fn set_stabilizer(&mut self, method: StabilizerMethod) {
        self.train.stabilizer.method = method;
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg = |m: String| ExperimentError::Config(m);
        if self.seeds.is_empty() {
            return Err(cfg("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(cfg(format!("duplicate seeds in {:?}", self.seeds)));
        }
        self.cohort.ratios.validate().map_err(|e| cfg(e.to_string()))?;
        self.cohort.params.validate().map_err(|e| cfg(e.to_string()))?;
        if self.cohort.n < 20 {
            return Err(cfg(format!("cohort.n must be at least 20, got {}", self.cohort.n)));
        }
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.stop.validate().map_err(cfg)?;
        self.rl.validate().map_err(|e| cfg(e.to_string()))?;
        Ok(())
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
