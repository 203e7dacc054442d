//! TOML configuration shared by the CLI subcommands.
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//! prompts = "prompts.toml"      # optional, built-in table otherwise
//!
//! [vocab]
//! max_words = 4000
//! min_frequency = 1
//!
//! [split]
//! train = 0.8
//! dev = 0.1
//! test = 0.1
//!
//! [model]       # ModelConfig fields
//! [train]       # TrainConfig fields
//! [llm]         # LlmConfig fields; the credential itself is read from the
//!               # environment variable named by `api_key_env`
//! [service]     # ServiceConfig fields
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{builtin_prompt_table, CorpusError, PromptTable};
use crate::feedback::LlmConfig;
use crate::scoring::{ModelConfig, TrainConfig};
use crate::service::ServiceConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unsupported config schema_version {found} (expected {CONFIG_SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error(transparent)]
    Prompts(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_words: usize,
    pub min_frequency: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            max_words: crate::tokenizer::DEFAULT_MAX_WORDS,
            min_frequency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub prompts: Option<PathBuf>,
    pub vocab: VocabConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub llm: LlmConfig,
    pub service: ServiceConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            prompts: None,
            vocab: VocabConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            llm: LlmConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: AppConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                found: cfg.schema_version,
            });
        }
        let mut cfg = cfg;
        if let Some(p) = &cfg.prompts {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.prompts = Some(dir.join(p));
                }
            }
        }
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    /// Propagates one seed to model initialization, batch order and splits.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn prompt_table(&self) -> Result<PromptTable, ConfigError> {
        match &self.prompts {
            Some(p) => Ok(PromptTable::load(p)?),
            None => Ok(builtin_prompt_table()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = AppConfig::from_toml_str("schema_version = 1\nseed = 4\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.model.seed, 4);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.llm.timeout_secs, 30.0);
        assert_eq!(cfg.service.max_essay_bytes, 64 * 1024);
    }

    #[test]
    fn rejects_other_schema_versions_and_inline_credentials() {
        assert!(matches!(
            AppConfig::from_toml_str("schema_version = 2", Path::new("c.toml")),
            Err(ConfigError::SchemaVersion { found: 2 })
        ));
        assert!(matches!(
            AppConfig::from_toml_str("schema_version = 1\n[llm]\napi_key = \"sk-1\"\n", Path::new("c.toml")),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn relative_prompt_path_resolves_against_config_dir() {
        let cfg = AppConfig::from_toml_str(
            "schema_version = 1\nprompts = \"p.toml\"\n",
            Path::new("/etc/aes/config.toml"),
        )
        .unwrap();
        assert_eq!(cfg.prompts.unwrap(), PathBuf::from("/etc/aes/p.toml"));
    }
}
