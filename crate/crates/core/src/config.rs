//! Experiment configuration file (TOML).
//!
//! ```toml
//! dataset_dir = "data/parlai"   # directory with train/val/test.jsonl
//! out_dir = "runs/example"
//! synthetic = false             # generate data from [synthetic_data] instead
//! parallel = 1
//!
//! [experiment]
//! seed = 7
//! n_iterations = 10
//! k = 3
//! tau = 20
//! method = "gbair"              # gbair | random | embedding
//! measure = "cosine"            # cosine | dot
//! intervention = "relabel"      # relabel | remove
//!
//! [experiment.train]
//! learning_rate = 0.1
//!
//! [experiment.encoder]
//! dim = 64
//!
//! [synthetic_data]
//! n_train = 1000
//!
//! [sweep]
//! seeds = [1, 2, 3]
//! corruption_rate = [0.1, 0.2, 0.4]
//! ```
//!
//! Unknown keys are rejected; missing keys take their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, SyntheticConfig};
use crate::error::{Error, Result};
use crate::gbair::{ExperimentConfig, Intervention, Method};
use crate::harness::{SweepAxes, SweepSpec};
use crate::tracin::Measure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    pub method: Option<Vec<Method>>,
    pub corruption_rate: Option<Vec<f64>>,
    pub val_subset_size: Option<Vec<usize>>,
    pub measure: Option<Vec<Measure>>,
    pub intervention: Option<Vec<Intervention>>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            seeds: vec![0, 1, 2],
            method: None,
            corruption_rate: None,
            val_subset_size: None,
            measure: None,
            intervention: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub dataset_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub synthetic: bool,
    pub parallel: usize,
    pub experiment: ExperimentConfig,
    pub synthetic_data: SyntheticConfig,
    pub sweep: SweepSection,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            dataset_dir: None,
            out_dir: None,
            synthetic: false,
            parallel: 1,
            experiment: ExperimentConfig::default(),
            synthetic_data: SyntheticConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            // toml reports unknown keys as "unknown field `x`, expected ..."
            let field = message
                .split('`')
                .nth(1)
                .filter(|_| message.starts_with("unknown field"))
                .unwrap_or("config")
                .to_string();
            Error::InvalidConfig {
                field,
                message: e.to_string().trim().replace('\n', " "),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            base: self.experiment.clone(),
            axes: SweepAxes {
                method: self.sweep.method.clone(),
                corruption_rate: self.sweep.corruption_rate.clone(),
                val_subset_size: self.sweep.val_subset_size.clone(),
                measure: self.sweep.measure.clone(),
                intervention: self.sweep.intervention.clone(),
            },
            seeds: self.sweep.seeds.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallel == 0 {
            return Err(Error::invalid("parallel", "must be at least 1"));
        }
        self.experiment.validate().map_err(|e| prefix_field("experiment", e))?;
        if self.synthetic {
            self.synthetic_data.validate()?;
        }
        Ok(())
    }

    /// Checks that need the data, e.g. subset sizes against the validation split.
    pub fn validate_run(&self, split: &DatasetSplit) -> Result<()> {
        self.experiment
            .validate_for(split)
            .map_err(|e| prefix_field("experiment", e))
    }

    /// As [`validate_run`](Self::validate_run), for every cell of the sweep grid.
    pub fn validate_sweep(&self, split: &DatasetSplit) -> Result<()> {
        for cell in self.sweep_spec().cells() {
            cell.config
                .validate_for(split)
                .map_err(|e| prefix_field("experiment", e))?;
        }
        Ok(())
    }
}

fn prefix_field(prefix: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig { field, message } => Error::InvalidConfig {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    }
}
