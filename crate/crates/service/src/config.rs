use std::path::{Path, PathBuf};

use mobseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Service settings: a TOML file of key-value pairs, then `MOBSEG_*`
/// environment overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub k_dest: usize,
    pub k_bridge: usize,
    pub latency_budget_ms: u64,
    pub seed: u64,
    pub shap_samples: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("data"),
            k_dest: mobseg_core::model::train::DEFAULT_K_DEST,
            k_bridge: mobseg_core::segregation::DEFAULT_K_BRIDGE,
            latency_budget_ms: 2000,
            seed: 0,
            shap_samples: mobseg_core::whatif::DEFAULT_SHAP_SAMPLES,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse `{v}`")))
}

impl ServiceConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads `path` if given, then applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut c = match path {
            Some(p) => {
                let s = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Self::from_toml(&s)?
            }
            None => Self::default(),
        };
        c.apply_env(std::env::vars())?;
        c.validate()?;
        Ok(c)
    }

    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (k, v) in vars {
            match k.as_str() {
                "MOBSEG_HOST" => self.host = v,
                "MOBSEG_PORT" => self.port = parse(&k, &v)?,
                "MOBSEG_DATA_DIR" => self.data_dir = PathBuf::from(v),
                "MOBSEG_K_DEST" => self.k_dest = parse(&k, &v)?,
                "MOBSEG_K_BRIDGE" => self.k_bridge = parse(&k, &v)?,
                "MOBSEG_LATENCY_BUDGET_MS" => self.latency_budget_ms = parse(&k, &v)?,
                "MOBSEG_SEED" => self.seed = parse(&k, &v)?,
                "MOBSEG_SHAP_SAMPLES" => self.shap_samples = parse(&k, &v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_dest < 2 || self.k_bridge < 1 {
            return Err(Error::InvalidConfig("k_dest must be >= 2 and k_bridge >= 1".into()));
        }
        Ok(())
    }
}
