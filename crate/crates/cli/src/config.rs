use std::path::{Path, PathBuf};

use eaft_core::forgebench::{build_truth, sample_chain, ConflictSpec, DomainSpec};
use eaft_core::toylm::{ModelConfig, OptimizerConfig};
use eaft_core::ObjectiveSpec;
use serde::Deserialize;

use crate::CliError;

pub const CONFIG_VERSION: &str = "1";

/// Either a benchmark objective name or a full objective spec.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveChoice {
    Named(String),
    Spec(ObjectiveSpec),
}

impl<'de> Deserialize<'de> for ObjectiveChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::String(s) => Ok(Self::Named(s)),
            other => serde_json::from_value(other).map(Self::Spec).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainCorpus {
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default = "defaults::sequences")]
    pub sequences: usize,
    #[serde(default = "defaults::seq_len")]
    pub seq_len: usize,
    /// Sampling seed; the transition table comes from `domain.seed`.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Token-id JSONL, one sequence per line.
    Path(PathBuf),
    /// Sequences sampled from a synthetic Markov chain.
    Chain(ChainCorpus),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: String,
    /// Required unless `init` is given; must match the init checkpoint otherwise.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub objective: ObjectiveChoice,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub sample_seed: u64,
    #[serde(default = "defaults::capture_every")]
    pub capture_every: usize,
    /// Percentile used to set mask thresholds for named mask objectives.
    #[serde(default = "defaults::mask_quantile")]
    pub mask_quantile: f64,
    /// Top-K size for named objectives.
    #[serde(default = "defaults::k")]
    pub k: usize,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub reference: Option<PathBuf>,
}

mod defaults {
    use eaft_core::toylm::OptimizerConfig;

    pub fn sequences() -> usize {
        200
    }
    pub fn seq_len() -> usize {
        32
    }
    pub fn optimizer() -> OptimizerConfig {
        OptimizerConfig::default()
    }
    pub fn steps() -> usize {
        500
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn capture_every() -> usize {
        10
    }
    pub fn mask_quantile() -> f64 {
        0.15
    }
    pub fn k() -> usize {
        20
    }
}

pub fn check_version(found: &str) -> Result<(), CliError> {
    if found != CONFIG_VERSION {
        return Err(CliError::Config(format!("unsupported config version '{found}' (expected '{CONFIG_VERSION}')")));
    }
    Ok(())
}

/// Reads and strictly parses a JSON document.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Resolves a config-relative path against the config's directory.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = read_json(path)?;
        check_version(&cfg.version)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let CorpusSource::Path(p) = &mut cfg.corpus {
            *p = resolve(base, p);
        }
        for p in [&mut cfg.init, &mut cfg.reference].into_iter().flatten() {
            *p = resolve(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Shape checks and path existence; runs before any work.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: eaft_core::Error| CliError::Config(e.to_string());
        if self.model.is_none() && self.init.is_none() {
            return Err(CliError::Config("config needs 'model' or 'init'".into()));
        }
        if let Some(m) = &self.model {
            m.validate().map_err(cfg_err)?;
        }
        if let ObjectiveChoice::Spec(s) = &self.objective {
            s.validate().map_err(cfg_err)?;
        }
        self.optimizer.validate().map_err(cfg_err)?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(CliError::Config("steps and batch_size must be positive".into()));
        }
        if !(self.mask_quantile > 0.0 && self.mask_quantile < 1.0) {
            return Err(CliError::Config(format!("mask_quantile {} must lie in (0, 1)", self.mask_quantile)));
        }
        if self.k == 0 {
            return Err(CliError::Config("k must be positive".into()));
        }
        match &self.corpus {
            CorpusSource::Path(p) => require_file(p)?,
            CorpusSource::Chain(c) => {
                c.domain.validate().map_err(cfg_err)?;
                if c.sequences == 0 || c.seq_len <= c.domain.markov_order {
                    return Err(CliError::Config("chain corpus needs sequences > 0 and seq_len > markov_order".into()));
                }
            }
        }
        for p in [&self.init, &self.reference].into_iter().flatten() {
            require_file(p)?;
        }
        Ok(())
    }
}

pub fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("no such file: {}", p.display())))
    }
}

impl ChainCorpus {
    pub fn sample(&self) -> Result<eaft_core::toylm::Corpus, CliError> {
        let none = ConflictSpec { conflict_rate: 0.0, novelty_rate: 0.0 };
        let truth = build_truth(&self.domain, &none).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(sample_chain(&truth, self.seed, self.sequences, self.seq_len))
    }
}
