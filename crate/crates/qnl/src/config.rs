//! Run configuration, layered as built-in defaults, then a TOML file, then
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::Normalization;
use crate::kg::EndpointConfig;
use crate::llm::ProviderConfig;

pub const CONFIG_ENV: &str = "QNL_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    Bi,
    Head,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    Mock,
    File,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    /// Seed of the mock embedder.
    pub seed: u64,
    /// Embedding dump for `file`.
    pub path: Option<PathBuf>,
    /// Service URL for `http`.
    pub url: Option<String>,
    pub normalization: Normalization,
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Mock,
            dim: qnl_core::verifier::DEFAULT_DIM,
            seed: 0,
            path: None,
            url: None,
            normalization: Normalization::UnitLength,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    pub backend: BackendChoice,
    /// Score key override; defaults to `bi`, `head` or `external:<id>`.
    pub name: Option<String>,
    pub embedder: EmbedderConfig,
    pub head_model: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            backend: BackendChoice::Bi,
            name: None,
            embedder: EmbedderConfig::default(),
            head_model: None,
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub prompt_dir: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    /// Step-specific default when unset: 0.5 to classify, 0.6 to filter.
    pub tau: Option<f64>,
    pub seed: u64,
    pub jobs: usize,
    pub reflect: bool,
    pub k: usize,
    /// Fixed provenance timestamp, for reproducible output.
    pub timestamp: Option<String>,
    pub endpoint: EndpointConfig,
    pub provider: ProviderConfig,
    pub verifier: VerifierConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: None,
            cache: None,
            prompt_dir: None,
            transcript: None,
            tau: None,
            seed: 0,
            jobs: 4,
            reflect: true,
            k: qnl_core::prompt::DEFAULT_K,
            timestamp: None,
            endpoint: EndpointConfig::default(),
            provider: ProviderConfig::default(),
            verifier: VerifierConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Defaults overlaid with `path`, or with `$QNL_CONFIG` when no path is
    /// given.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let Some(path) = path.map(Path::to_path_buf).or(from_env) else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(&path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(t) = self.tau {
            if !(0.0..=1.0).contains(&t) {
                return Err(ConfigError::Invalid(format!("tau {t} outside [0, 1]")));
            }
        }
        if self.jobs == 0 {
            return Err(ConfigError::Invalid("jobs must be at least 1".into()));
        }
        if self.verifier.embedder.dim == 0 {
            return Err(ConfigError::Invalid("embedder dim must be positive".into()));
        }
        Ok(())
    }

    /// TOML rendering with credentials masked.
    pub fn redacted_toml(&self) -> String {
        let mut value = toml::Value::try_from(self).expect("config serializes");
        redact(&mut value, "");
        toml::to_string(&value).expect("config renders")
    }
}

fn is_secret_key(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    !k.ends_with("_env")
        && ["secret", "token", "password", "api_key", "apikey"]
            .iter()
            .any(|s| k.contains(s))
}

/// Masks the `user:pass@` part of a URL.
fn mask_userinfo(s: &str) -> Option<String> {
    let scheme_end = s.find("://")? + 3;
    let rest = &s[scheme_end..];
    let authority_end = rest.find('/').unwrap_or(rest.len());
    let at = rest[..authority_end].rfind('@')?;
    Some(format!("{}***@{}", &s[..scheme_end], &rest[at + 1..]))
}

fn redact(value: &mut toml::Value, key: &str) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t.iter_mut() {
                redact(v, k);
            }
        }
        toml::Value::Array(a) => a.iter_mut().for_each(|v| redact(v, key)),
        toml::Value::String(s) => {
            if is_secret_key(key) {
                *s = "***".into();
            } else if let Some(masked) = mask_userinfo(s) {
                *s = masked;
            }
        }
        _ => {}
    }
}
