//! Run configuration: one TOML file driving every subcommand.
//!
//! The file mirrors the library config structs section by section, so every
//! knob a run can turn lives in a single serializable document. Command-line
//! flags override file values; the effective config is echoed into the
//! output directory so a run can always be reproduced from its artifacts.
//! Unknown keys are rejected everywhere, which catches typos before they
//! silently fall back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::RewardKind;
use crate::eval::TrainerKind;
use crate::inference::{InferenceConfig, InferenceMode};
use crate::nn::NetworkConfig;
use crate::synthdata::PerturbationRange;
use crate::trainer::A3CConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path} is invalid: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid config: {detail}")]
    Invalid { detail: String },
}

/// Names of perturbation ranges the benchmark section may reference.
pub const BUILTIN_RANGES: [&str; 5] = ["e1", "e2", "e1_desk", "e2_desk", "identity"];

/// Looks up a named perturbation range.
pub fn resolve_range(name: &str) -> Option<PerturbationRange> {
    match name {
        "e1" => Some(PerturbationRange::e1()),
        "e2" => Some(PerturbationRange::e2()),
        "e1_desk" => Some(PerturbationRange::e1_desk()),
        "e2_desk" => Some(PerturbationRange::e2_desk()),
        "identity" => Some(PerturbationRange::identity()),
        _ => None,
    }
}

/// One benchmark method entry: which checkpoint to load and how to run it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSpec {
    pub trainer: TrainerKind,
    pub reward: RewardKind,
    pub mode: InferenceMode,
    /// Checkpoint file for this variant.
    pub checkpoint: PathBuf,
    /// Stopping threshold override; falls back to the `[inference]` value.
    pub trs: Option<f64>,
}

impl Default for VariantSpec {
    fn default() -> Self {
        VariantSpec {
            trainer: TrainerKind::Rl,
            reward: RewardKind::Lme,
            mode: InferenceMode::Greedy,
            checkpoint: PathBuf::new(),
            trs: None,
        }
    }
}

/// Benchmark settings: which variants to run over which ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    /// Registrations per (pair, range) cell.
    pub n_perturb_per_pair: usize,
    /// Named perturbation ranges; see [`BUILTIN_RANGES`].
    pub ranges: Vec<String>,
    /// Report file stem inside the output directory.
    pub report_stem: String,
    /// Method entries, one `[[benchmark.variant]]` table each.
    #[serde(rename = "variant")]
    pub variants: Vec<VariantSpec>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            n_perturb_per_pair: 50,
            ranges: vec!["e1".to_string(), "e2".to_string()],
            report_stem: "report".to_string(),
            variants: Vec::new(),
        }
    }
}

/// Everything a run needs. Missing keys take the documented defaults below;
/// unknown keys are an error.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. The `--seed` flag copies it into the train and inference
    /// sections too, making single-worker runs fully reproducible.
    pub seed: u64,
    /// Directory for logs, checkpoints, reports and the config echo.
    pub out_dir: PathBuf,
    /// Dataset manifest path, written by gen-data and read by the rest.
    pub dataset: PathBuf,
    /// Pair count for gen-data.
    pub pairs: usize,
    /// Image edge length for gen-data.
    pub image_size: usize,
    pub network: NetworkConfig,
    pub train: A3CConfig,
    pub inference: InferenceConfig,
    pub benchmark: BenchmarkSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: PathBuf::from("data/manifest.toml"),
            pairs: 8,
            image_size: 84,
            network: NetworkConfig::table1(84),
            train: A3CConfig::default(),
            inference: InferenceConfig::default(),
            benchmark: BenchmarkSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Cross-section checks that individual struct validators cannot see.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |detail: String| Err(ConfigError::Invalid { detail });
        if self.pairs == 0 {
            return invalid("pairs must be at least 1".into());
        }
        if self.image_size < 8 {
            return invalid(format!("image_size {} is too small", self.image_size));
        }
        self.network
            .validate()
            .map_err(|e| ConfigError::Invalid { detail: e.to_string() })?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid { detail: e.to_string() })?;
        self.inference
            .validate()
            .map_err(|e| ConfigError::Invalid { detail: e.to_string() })?;
        if self.train.env.input_size != self.network.input_size {
            return invalid(format!(
                "train.env.input_size {} must match network.input_size {}",
                self.train.env.input_size, self.network.input_size
            ));
        }
        if self.benchmark.n_perturb_per_pair == 0 {
            return invalid("benchmark.n_perturb_per_pair must be at least 1".into());
        }
        for name in &self.benchmark.ranges {
            if resolve_range(name).is_none() {
                return invalid(format!(
                    "unknown benchmark range {name:?}; choose from {BUILTIN_RANGES:?}"
                ));
            }
        }
        Ok(())
    }

    /// Copies the master seed into every section that keeps its own.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.inference.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the effective config into `dir` so the run is reproducible
    /// from its artifacts alone.
    pub fn echo_into(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}
