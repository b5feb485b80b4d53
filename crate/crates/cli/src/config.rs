//! Run settings resolved from flags, an optional TOML file and defaults, in
//! that order of precedence.
//!
//! ```toml
//! model = "mock-oracle"
//! method = "full"
//! dataset = "data/manifest.jsonl"
//! resolution = 360
//! workers = 8
//! seed = 0
//! cache = true
//! output = "runs/exp1"
//! prompts = "prompts/full_opt"
//! registry = "models.toml"
//!
//! [serve]
//! port = 8080
//! lease_seconds = 300
//! ui_dir = "ui/dist"
//! ```
//!
//! Relative paths in the file are resolved against the file's directory.

use std::path::{Path, PathBuf};

use scenelayers::imageprep::ResolutionLevel;
use scenelayers::pipeline::MethodId;
use serde::{Deserialize, Serialize};

use crate::args::RunArgs;
use crate::CliError;

pub const DEFAULT_MODEL: &str = "mock-oracle";
pub const DEFAULT_WORKERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ResolutionSetting {
    Height(u32),
    Text(String),
}

impl ResolutionSetting {
    fn level(&self) -> Result<ResolutionLevel, CliError> {
        match self {
            ResolutionSetting::Height(h) => ResolutionLevel::try_from(*h),
            ResolutionSetting::Text(s) => s.parse(),
        }
        .map_err(CliError::Usage)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    pub bind: Option<String>,
    pub port: Option<u16>,
    pub log: Option<PathBuf>,
    pub lease_seconds: Option<u64>,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub method: Option<String>,
    pub dataset: Option<PathBuf>,
    pub resolution: Option<ResolutionSetting>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub cache: Option<bool>,
    pub output: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub serve: ServeSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let mut c: FileConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut c.dataset,
            &mut c.output,
            &mut c.prompts,
            &mut c.registry,
            &mut c.serve.log,
            &mut c.serve.ui_dir,
        ] {
            if let Some(v) = p.as_mut() {
                *v = base.join(&*v);
            }
        }
        Ok(c)
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: String,
    pub method: MethodId,
    pub dataset: Option<PathBuf>,
    pub resolution: ResolutionLevel,
    pub workers: usize,
    pub seed: u64,
    pub cache: bool,
    pub output: PathBuf,
    pub prompts: Option<PathBuf>,
    pub registry: Option<PathBuf>,
}

pub fn parse_method(name: &str) -> Result<MethodId, CliError> {
    name.parse().map_err(CliError::Usage)
}

impl RunConfig {
    pub fn resolve(args: &RunArgs, file: &FileConfig, command: &str) -> Result<Self, CliError> {
        let method = match args.method.as_deref().or(file.method.as_deref()) {
            Some(m) => parse_method(m)?,
            None => MethodId::Full,
        };
        let resolution = match (&args.resolution, &file.resolution) {
            (Some(s), _) => s.parse().map_err(CliError::Usage)?,
            (None, Some(r)) => r.level()?,
            (None, None) => ResolutionLevel::P360,
        };
        let workers = args.workers.or(file.workers).unwrap_or(DEFAULT_WORKERS);
        if workers == 0 {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        let cache = if args.no_cache {
            false
        } else {
            file.cache.unwrap_or(true)
        };
        Ok(RunConfig {
            model: args
                .model
                .clone()
                .or_else(|| file.model.clone())
                .unwrap_or_else(|| DEFAULT_MODEL.into()),
            method,
            dataset: args.dataset.clone().or_else(|| file.dataset.clone()),
            resolution,
            workers,
            seed: args.seed.or(file.seed).unwrap_or(0),
            cache,
            output: args
                .output
                .clone()
                .or_else(|| file.output.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(command)),
            prompts: args.prompts.clone().or_else(|| file.prompts.clone()),
            registry: args.registry.clone().or_else(|| file.registry.clone()),
        })
    }

    pub fn dataset(&self) -> Result<&Path, CliError> {
        self.dataset.as_deref().ok_or_else(|| {
            CliError::Usage(
                "no dataset given (use --dataset or `dataset` in the config file)".into(),
            )
        })
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output.join("cache")
    }
}
