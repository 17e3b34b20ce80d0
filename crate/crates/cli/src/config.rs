//! Optional TOML configuration. Every field has a working default, and
//! command-line flags take precedence over the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mudwatch_core::mudgen::GenOptions;
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gateway: Option<String>,
    /// "dyn_internet,dyn_local,static_internet"
    pub thresholds: Option<String>,
    pub epoch_mins: Option<f64>,
    pub convergence_epochs: Option<u32>,
    /// Compact automatically after this many epochs without a sole winner.
    pub compact_after: Option<u32>,
    pub zones: Option<PathBuf>,
    pub mud_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub generate: GenSection,
    /// Trace label to device MAC, for traces whose device cannot be guessed.
    pub devices: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub wildcard_threshold: Option<usize>,
    pub stun_detection: Option<bool>,
    pub gateway_namespace: Option<String>,
    pub mud_url: Option<String>,
    pub systeminfo: Option<String>,
}

impl GenSection {
    pub fn options(&self) -> GenOptions {
        let d = GenOptions::default();
        GenOptions {
            wildcard_endpoint_threshold: self.wildcard_threshold.unwrap_or(d.wildcard_endpoint_threshold),
            stun_detection: self.stun_detection.unwrap_or(d.stun_detection),
            gateway_namespace: self.gateway_namespace.clone().unwrap_or(d.gateway_namespace),
            mud_url: self.mud_url.clone().unwrap_or(d.mud_url),
            systeminfo: self.systeminfo.clone().unwrap_or(d.systeminfo),
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Syntax(toml::de::Error),
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        toml::from_str(&text).map_err(ConfigError::Syntax)
    }
}
