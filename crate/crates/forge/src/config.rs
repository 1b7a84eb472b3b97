//! Service configuration, read from a UTF-8 TOML file.
//!
//! ```toml
//! [forge]
//! api_base_url = "https://api.github.com"
//! html_base_url = "https://github.com"
//! token = "..."              # or TRIAGE_FORGE_TOKEN
//! webhook_secret = "..."     # or TRIAGE_WEBHOOK_SECRET
//! page_size = 100
//!
//! [server]
//! listen = "127.0.0.1:8080"
//! workers = 4
//! queue_capacity = 1000
//!
//! [store]
//! path = "triage.db"
//!
//! [analyzers]
//! pool_size = 4
//! deadline_secs = 60
//!
//! [analyzers.duplicate]
//! id = "tfidf-duplicate"
//! threshold = 0.6
//!
//! [analyzers.localization]
//! id = "tfidf-localization"
//! top_k = 5
//! consensus_runs = 1
//!
//! [labels]
//! blocker = "B60205"
//! duplicate = "CFD3D7"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;
use triage_core::model::is_hex_color;
use triage_core::render::LabelPalette;
use triage_core::SeverityClass;

use crate::client::RetryPolicy;

pub const TOKEN_ENV: &str = "TRIAGE_FORGE_TOKEN";
pub const WEBHOOK_SECRET_ENV: &str = "TRIAGE_WEBHOOK_SECRET";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// A credential that never shows up in `Debug` output or error messages.
#[derive(Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(transparent)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0.is_empty() { "Secret(<empty>)" } else { "Secret(***)" })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    #[serde(default = "default_api_base")]
    pub api_base_url: String,
    #[serde(default = "default_html_base")]
    pub html_base_url: String,
    #[serde(default)]
    pub token: Secret,
    #[serde(default)]
    pub webhook_secret: Secret,
    #[serde(default = "default_page_size")]
    pub page_size: u32,
}

fn default_api_base() -> String {
    "https://api.github.com".into()
}

fn default_html_base() -> String {
    "https://github.com".into()
}

fn default_page_size() -> u32 {
    100
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            api_base_url: default_api_base(),
            html_base_url: default_html_base(),
            token: Secret::default(),
            webhook_secret: Secret::default(),
            page_size: default_page_size(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    /// Times a job is attempted before it is marked failed.
    #[serde(default = "default_job_attempts")]
    pub max_job_attempts: u32,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_workers() -> usize {
    4
}

fn default_queue_capacity() -> usize {
    1000
}

fn default_job_attempts() -> u32 {
    3
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            workers: default_workers(),
            queue_capacity: default_queue_capacity(),
            max_job_attempts: default_job_attempts(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreConfig {
    #[serde(default = "default_store_path")]
    pub path: PathBuf,
}

fn default_store_path() -> PathBuf {
    PathBuf::from("triage.db")
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            path: default_store_path(),
        }
    }
}

/// Selection of one analyzer plus its free-form options.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct AnalyzerSelection {
    pub id: Option<String>,
    #[serde(flatten)]
    pub options: BTreeMap<String, toml::Value>,
}

impl AnalyzerSelection {
    /// Options rendered as strings, the form analyzers parse.
    pub fn string_options(&self) -> BTreeMap<String, String> {
        self.options
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzersConfig {
    /// Worker threads for duplicate scoring; 1 scores serially.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_deadline_secs")]
    pub deadline_secs: u64,
    #[serde(default)]
    pub duplicate: AnalyzerSelection,
    #[serde(default)]
    pub severity: AnalyzerSelection,
    #[serde(default)]
    pub localization: AnalyzerSelection,
}

fn default_pool_size() -> usize {
    4
}

fn default_deadline_secs() -> u64 {
    60
}

impl Default for AnalyzersConfig {
    fn default() -> Self {
        Self {
            pool_size: default_pool_size(),
            deadline_secs: default_deadline_secs(),
            duplicate: AnalyzerSelection::default(),
            severity: AnalyzerSelection::default(),
            localization: AnalyzerSelection::default(),
        }
    }
}

impl AnalyzersConfig {
    pub fn deadline(&self) -> Duration {
        Duration::from_secs(self.deadline_secs)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsConfig {
    pub blocker: Option<String>,
    pub critical: Option<String>,
    pub major: Option<String>,
    pub minor: Option<String>,
    pub trivial: Option<String>,
    pub duplicate: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    #[serde(default = "default_initial_ms")]
    pub initial_ms: u64,
    #[serde(default = "default_max_delay_ms")]
    pub max_delay_ms: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
}

fn default_initial_ms() -> u64 {
    1000
}

fn default_max_delay_ms() -> u64 {
    60_000
}

fn default_attempts() -> u32 {
    6
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            initial_ms: default_initial_ms(),
            max_delay_ms: default_max_delay_ms(),
            max_attempts: default_attempts(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub forge: ForgeConfig,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub store: StoreConfig,
    #[serde(default)]
    pub analyzers: AnalyzersConfig,
    #[serde(default)]
    pub labels: LabelsConfig,
    #[serde(default)]
    pub retry: RetryConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads the file and applies environment overrides for secrets.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        config.apply_env(|k| std::env::var(k).ok());
        Ok(config)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(token) = get(TOKEN_ENV).filter(|v| !v.is_empty()) {
            self.forge.token = Secret::new(token);
        }
        if let Some(secret) = get(WEBHOOK_SECRET_ENV).filter(|v| !v.is_empty()) {
            self.forge.webhook_secret = Secret::new(secret);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !(1..=100).contains(&self.forge.page_size) {
            return invalid(format!("forge.page_size {} is outside [1, 100]", self.forge.page_size));
        }
        if self.server.workers == 0 {
            return invalid("server.workers must be positive".into());
        }
        if self.server.queue_capacity == 0 {
            return invalid("server.queue_capacity must be positive".into());
        }
        if self.server.max_job_attempts == 0 {
            return invalid("server.max_job_attempts must be positive".into());
        }
        if self.analyzers.pool_size == 0 {
            return invalid("analyzers.pool_size must be positive".into());
        }
        if self.analyzers.deadline_secs == 0 {
            return invalid("analyzers.deadline_secs must be positive".into());
        }
        if self.retry.max_attempts == 0 {
            return invalid("retry.max_attempts must be positive".into());
        }
        let labels = &self.labels;
        for (key, value) in [
            ("blocker", &labels.blocker),
            ("critical", &labels.critical),
            ("major", &labels.major),
            ("minor", &labels.minor),
            ("trivial", &labels.trivial),
            ("duplicate", &labels.duplicate),
        ] {
            if let Some(v) = value {
                if !is_hex_color(v) {
                    return invalid(format!("labels.{key} `{v}` is not a six-digit hex color"));
                }
            }
        }
        Ok(())
    }

    pub fn palette(&self) -> LabelPalette {
        let mut palette = LabelPalette::default();
        let l = &self.labels;
        for (class, value) in [
            (SeverityClass::Blocker, &l.blocker),
            (SeverityClass::Critical, &l.critical),
            (SeverityClass::Major, &l.major),
            (SeverityClass::Minor, &l.minor),
            (SeverityClass::Trivial, &l.trivial),
        ] {
            if let Some(color) = value {
                palette.severity.insert(class, color.clone());
            }
        }
        if let Some(color) = &l.duplicate {
            palette.duplicate_color = color.clone();
        }
        palette
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            initial_delay: Duration::from_millis(self.retry.initial_ms),
            max_delay: Duration::from_millis(self.retry.max_delay_ms),
            max_attempts: self.retry.max_attempts,
            ..RetryPolicy::default()
        }
    }
}
