//! TOML run configuration. Unknown keys are rejected at load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrfError};
use crate::potential::PotentialConfig;
use crate::proposal::ProposalConfig;
use crate::sampler::JumpConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// One token per line; built from the training text when absent.
    pub vocab: Option<PathBuf>,
    /// word2vec text format, imported into the potential's embedding.
    pub embeddings: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    pub threads: usize,
    pub precision: String,
    /// m: longest sentence modelled; longer training sentences are truncated.
    pub max_len: usize,
    pub max_vocab: usize,
    pub paths: Paths,
    pub potential: PotentialConfig,
    pub proposal: ProposalConfig,
    pub train: TrainConfig,
    pub jump: JumpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            precision: "f64".into(),
            max_len: 50,
            max_vocab: 10_000,
            paths: Paths::default(),
            potential: PotentialConfig::default(),
            proposal: ProposalConfig::default(),
            train: TrainConfig::default(),
            jump: JumpConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TrfError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrfError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            TrfError::Config(msg) => TrfError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.train,
            &mut cfg.paths.dev,
            &mut cfg.paths.vocab,
            &mut cfg.paths.embeddings,
            &mut cfg.paths.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != "f64" {
            return Err(TrfError::Config(format!(
                "precision {:?} is not supported; only \"f64\" is implemented",
                self.precision
            )));
        }
        if self.max_len == 0 {
            return Err(TrfError::Config("max_len must be >= 1".into()));
        }
        if self.max_vocab < 2 {
            return Err(TrfError::Config("max_vocab must be >= 2".into()));
        }
        self.potential.validate().map_err(as_config)?;
        self.train.validate()?;
        self.jump.validate()?;
        if self.proposal.d_e == 0 || self.proposal.hidden == 0 {
            return Err(TrfError::Config("proposal sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TrfError::Config(e.to_string()))
    }
}

fn as_config(e: TrfError) -> TrfError {
    match e {
        TrfError::Config(_) => e,
        other => TrfError::Config(other.to_string()),
    }
}
