use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rigtune::bench::SyntheticSpec;
use rigtune::implicit::{DirectionStrategy, StepPolicy};
use rigtune::optimizer::{OptimizerConfig, PipelineConfig};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    #[serde(default)]
    pub calibrate: Option<CalibrateConfig>,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
}

/// Paths are relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub rig: PathBuf,
    pub expressions: PathBuf,
    pub geometry: PathBuf,
    #[serde(default)]
    pub holdout_expressions: Option<PathBuf>,
    #[serde(default)]
    pub holdout_geometry: Option<PathBuf>,
    /// Rig file whose θ is the prior; defaults to `rig`.
    #[serde(default)]
    pub prior: Option<PathBuf>,
    #[serde(default)]
    pub epsilon_reg: f64,
    /// Expressions whose zero controls are filled from the tracker.
    #[serde(default)]
    pub augment: Vec<String>,
    /// Rig the tracker solves against during augmentation; defaults to `rig`.
    #[serde(default)]
    pub tracker_rig: Option<PathBuf>,
    #[serde(default = "default_lm")]
    pub tracker_lm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum Source {
    /// Generated bench: fine-tunes from θ_S on the training corpus.
    Synthetic { spec: SyntheticSpec },
    Files {
        rig: PathBuf,
        expressions: PathBuf,
        geometry: PathBuf,
        /// Starting θ_T; defaults to `rig`.
        #[serde(default)]
        tracker_rig: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub source: Source,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Secant directions for `∂v̂/∂θ`; omitted drops the term.
    #[serde(default)]
    pub directions: Option<DirectionStrategy>,
    #[serde(default)]
    pub step: StepPolicy,
    #[serde(default = "default_lm")]
    pub tracker_lm: f64,
}

fn default_lm() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.format_version != FORMAT_VERSION {
            bail!(
                "config {}: format_version {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                cfg.format_version
            );
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
