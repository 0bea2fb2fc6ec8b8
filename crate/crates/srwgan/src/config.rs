//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srwgan_core::data::TaskMode;
use srwgan_core::evaluation::EvalSettings;
use srwgan_core::training::TrainConfig;

use crate::blob::{read_json, sha256_hex};
use crate::error::{Error, Result};

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything a `train` invocation needs. Unknown keys are rejected at
/// every level so a misspelled hyperparameter never silently defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub mode: Option<TaskMode>,
    pub shots: Option<usize>,
    pub seed: Option<u64>,
    pub n_synth: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn to_json(&self) -> String {
        crate::blob::to_json(self)
    }

    /// Applies flag overrides. A seed override moves the evaluation seed
    /// along with the training seed.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.dataset {
            self.dataset = d.clone();
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
            if !m.uses_shots() && o.shots.is_none() {
                self.train.shots = 0;
            }
        }
        if let Some(s) = o.shots {
            self.train.shots = s;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
            self.eval.seed = s;
        }
        if let Some(n) = o.n_synth {
            self.eval.n_synth = n;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.n_synth == 0 {
            return Err(Error::Config("eval.n_synth must be positive".into()));
        }
        Ok(())
    }

    /// Content hash of the effective config. The output directory is not
    /// part of it, so moving the run root keeps run names stable.
    pub fn run_id(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let digest = sha256_hex(c.to_json().as_bytes());
        format!("run-{}", &digest[..16])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.run_id())
    }
}
