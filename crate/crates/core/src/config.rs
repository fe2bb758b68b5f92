//! The shared TOML run configuration. Every table is optional and falls back
//! to its defaults; a missing `[chain]` table selects the built-in chain.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{load_chain, pepper_like_chain, ChainConfig, ChainError, KinematicChain};
use crate::env::EnvConfig;
use crate::ik::IkParams;
use crate::percept::CameraConfig;
use crate::ppo::PpoConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("[chain]: {0}")]
    Chain(#[from] ChainError),
    #[error("[{table}]: {msg}")]
    Invalid { table: &'static str, msg: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub chain: Option<ChainConfig>,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub ik: IkParams,
    pub camera: CameraConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |table, e: &dyn std::fmt::Display| ConfigError::Invalid {
            table,
            msg: e.to_string(),
        };
        self.env.validate().map_err(|e| invalid("env", &e))?;
        self.ppo.validate().map_err(|e| invalid("ppo", &e))?;
        self.ik.validate().map_err(|e| invalid("ik", &e))?;
        self.camera.validate().map_err(|e| invalid("camera", &e))?;
        self.build_chain()?;
        Ok(())
    }

    pub fn build_chain(&self) -> Result<KinematicChain, ConfigError> {
        match &self.chain {
            Some(c) => Ok(load_chain(c)?),
            None => Ok(pepper_like_chain()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.build_chain().unwrap().dof(), 6);
    }

    #[test]
    fn partial_tables_override_fields() {
        let c = RunConfig::from_toml("[ppo]\ntotal_steps = 4096\nseed = 3\n[env]\nhorizon = 100\n")
            .unwrap();
        assert_eq!(c.ppo.total_steps, 4096);
        assert_eq!(c.ppo.n_steps, 2048);
        assert_eq!(c.env.horizon, 100);

        let c = RunConfig::from_toml("[env.targets]\nx = [0.7, 0.8]\n").unwrap();
        assert_eq!(c.env.targets.x, [0.7, 0.8]);
        assert_eq!(c.env.targets.y_offset, 0.05);
    }

    #[test]
    fn inline_chain_is_used() {
        let text = "[chain]\n[[chain.joints]]\nname = \"a\"\naxis = [0.0, 0.0, 1.0]\nlimits = [-1.0, 1.0]\nvelocity_limit = 1.0\n";
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.build_chain().unwrap().dof(), 1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[ppo]\nlr = 1.0\n"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[ppo]\ngamma = 2.0\n"),
            Err(ConfigError::Invalid { table: "ppo", .. })
        ));
        assert!(matches!(
            RunConfig::from_toml("[camera.intrinsics]\nfx = -1.0\nfy = 1.0\ncx = 1.0\ncy = 1.0\nwidth = 4\nheight = 4\n"),
            Err(ConfigError::Invalid { table: "camera", .. })
        ));
    }

    #[test]
    fn serialized_defaults_parse_back() {
        let c = RunConfig {
            chain: Some(ChainConfig::pepper_like()),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
