//! Run configuration.
//!
//! Configs are TOML files of `key = value` pairs grouped in the sections
//! `[data]`, `[embedder]`, `[bank]`, `[diffusion]` and `[eval]`. Every key is
//! optional and falls back to its default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::BankConfig;
use crate::diffusion::DiffusionConfig;
use crate::embedder::EmbedderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::synthdata::CorpusConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: CorpusConfig,
    pub embedder: EmbedderConfig,
    pub bank: BankConfig,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Canonical text form: every key, defaults included.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.embedder.validate()?;
        self.bank.validate()?;
        self.diffusion.validate()?;
        if self.data.emotions < 2 {
            return Err(Error::config("need at least two emotions"));
        }
        Ok(())
    }
}
