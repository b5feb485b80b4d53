use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Service settings, usually read from a TOML file:
///
/// ```toml
/// port = 8080
/// dataset = "labeled.jsonl"
/// log = "reviews.jsonl"
/// lease_seconds = 300
/// ui_dir = "ui/dist"
/// ```
///
/// Relative paths are resolved against the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Manifest to review.
    pub dataset: PathBuf,
    /// Append-only review log; defaults to `<dataset stem>.reviews.jsonl` beside the manifest.
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default = "default_lease")]
    pub lease_seconds: u64,
    /// Built UI bundle served under `/`.
    #[serde(default)]
    pub ui_dir: Option<PathBuf>,
}

fn default_bind() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

fn default_lease() -> u64 {
    300
}

impl ServiceConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            bind: default_bind(),
            port: default_port(),
            dataset: dataset.into(),
            log: None,
            lease_seconds: default_lease(),
            ui_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut config: ServiceConfig = toml::from_str(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.dataset = base.join(&config.dataset);
        config.log = config.log.map(|p| base.join(p));
        config.ui_dir = config.ui_dir.map(|p| base.join(p));
        Ok(config)
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| {
            let stem = self
                .dataset
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("dataset");
            self.dataset.with_file_name(format!("{stem}.reviews.jsonl"))
        })
    }
}
