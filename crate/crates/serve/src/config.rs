use std::collections::BTreeSet;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use woundseg::infer::{validate_threshold, DEPLOY_THRESHOLD};
use woundseg::models::ModelVariant;
use woundseg::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub variant: ModelVariant,
    /// Weight archive; without one the variant runs with seeded weights.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub threshold: f64,
    /// Frames in flight per stream; only 1 is supported.
    pub max_in_flight: usize,
    pub active: Option<ModelVariant>,
    /// Served variants; all seven with seeded weights when empty, in which
    /// case UNeXt-S is active by default.
    pub models: Vec<ModelEntry>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            threshold: DEPLOY_THRESHOLD,
            max_in_flight: 1,
            active: None,
            models: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative weight paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.models {
            if let Some(w) = m.weights.as_mut() {
                if w.is_relative() {
                    *w = base.join(&*w);
                }
            }
        }
        Ok(cfg)
    }

    pub fn resolved_models(&self) -> Vec<ModelEntry> {
        if self.models.is_empty() {
            ModelVariant::ALL.iter().map(|&variant| ModelEntry { variant, weights: None, seed: 0 }).collect()
        } else {
            self.models.clone()
        }
    }

    pub fn active_variant(&self) -> ModelVariant {
        match (self.active, self.models.first()) {
            (Some(v), _) => v,
            (None, Some(m)) => m.variant,
            (None, None) => ModelVariant::UNeXtS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_threshold(self.threshold)?;
        if self.max_in_flight != 1 {
            return Err(Error::Config("max_in_flight must be 1".into()));
        }
        let models = self.resolved_models();
        let variants: BTreeSet<_> = models.iter().map(|m| m.variant).collect();
        if variants.len() != models.len() {
            return Err(Error::Config("each variant may be configured only once".into()));
        }
        if !variants.contains(&self.active_variant()) {
            return Err(Error::Config(format!("active variant {} is not configured", self.active_variant())));
        }
        Ok(())
    }

    pub fn addr(&self) -> Result<SocketAddr> {
        (self.host.as_str(), self.port)
            .to_socket_addrs()
            .ok()
            .and_then(|mut a| a.next())
            .ok_or_else(|| Error::Config(format!("cannot resolve {}:{}", self.host, self.port)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_serve_every_variant() {
        let cfg = ServiceConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.threshold, 0.75);
        assert_eq!(cfg.resolved_models().len(), 7);
        assert_eq!(cfg.active_variant(), ModelVariant::UNeXtS);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ServiceConfig::from_toml_str("threshold = 1.0").is_err());
        assert!(ServiceConfig::from_toml_str("max_in_flight = 2").is_err());
        assert!(ServiceConfig::from_toml_str("bogus = 1").is_err());
        let text = "active = \"ENet\"\n[[models]]\nvariant = \"UNeXt-S\"\n";
        assert!(ServiceConfig::from_toml_str(text).is_err());
    }
}
