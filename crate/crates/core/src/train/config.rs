use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use super::scheduler::PlateauConfig;
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::models::{ModelVariant, MIN_SPATIAL, SPATIAL_MULTIPLE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: ModelVariant,
    /// Optional weight archive to start from instead of a fresh init.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    /// Split manifest; generated from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_resize")]
    pub resize: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_threshold")]
    pub eval_threshold: f64,
}

fn default_resize() -> usize {
    512
}
fn default_batch() -> usize {
    4
}
fn default_eval_threshold() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub epochs: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self { epochs: default_epochs(), lr: a.lr, betas: a.betas, eps: a.eps, weight_decay: a.weight_decay }
    }
}

impl OptimizerSection {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, betas: self.betas, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Every training hyperparameter, loadable from a TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    pub run_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub scheduler: PlateauConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.run_dir);
        fix(&mut cfg.data.root);
        if let Some(p) = cfg.data.manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.model.init_weights.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > self.scheduler.min_lr && self.scheduler.min_lr > 0.0) {
            return Err(Error::Config("require optimizer.lr > scheduler.min_lr > 0".into()));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) || o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("optimizer betas must lie in [0, 1), eps > 0, weight_decay >= 0".into()));
        }
        let d = &self.data;
        if d.batch_size == 0 {
            return Err(Error::Config("data.batch_size must be at least 1".into()));
        }
        if d.resize % SPATIAL_MULTIPLE != 0 || d.resize < MIN_SPATIAL {
            return Err(Error::Config(format!(
                "data.resize must be a multiple of {SPATIAL_MULTIPLE} and at least {MIN_SPATIAL}"
            )));
        }
        if !(d.eval_threshold > 0.0 && d.eval_threshold < 1.0) {
            return Err(Error::Config("data.eval_threshold must lie in (0, 1)".into()));
        }
        self.scheduler.validate()?;
        self.augment.validate()
    }
}
