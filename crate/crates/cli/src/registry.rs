//! Model registry. A TOML file lists `[[model]]` entries:
//!
//! ```toml
//! [[model]]
//! name = "gpt-4o"
//! input_price = 2.5
//! output_price = 10.0
//! endpoint = { kind = "openai_compatible", base_url = "https://api.openai.com/v1", api_key_env = "OPENAI_API_KEY" }
//!
//! [[model]]
//! name = "noisy-oracle"
//! endpoint = { kind = "mock", oracle = { error_rate = 0.2, seed = 3 } }
//! ```
//!
//! `mock-oracle` is always available: a zero-error mock answering from the
//! dataset's gold labels. Mock oracles without a labels file also answer from
//! the dataset.

use std::path::Path;
use std::sync::Arc;

use scenelayers::datastore::Dataset;
use scenelayers::gateway::{CacheMode, Endpoint, Gateway, MockBackend, ModelSpec, OracleLabel};
use serde::Deserialize;

use crate::config::RunConfig;
use crate::CliError;

pub const BUILTIN_MOCK: &str = "mock-oracle";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    #[serde(default, rename = "model")]
    models: Vec<ModelSpec>,
}

pub fn load_registry(path: &Path) -> Result<Vec<ModelSpec>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("registry {}: {e}", path.display())))?;
    let file: RegistryFile = toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("registry {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(file
        .models
        .into_iter()
        .map(|mut spec| {
            if let Endpoint::Mock { fixture, oracle } = &mut spec.endpoint {
                if let Some(f) = fixture.as_mut() {
                    *f = base.join(&*f);
                }
                if let Some(l) = oracle.as_mut().and_then(|o| o.labels.as_mut()) {
                    *l = base.join(&*l);
                }
            }
            spec
        })
        .collect())
}

fn oracle_labels(dataset: Option<&Dataset>) -> Vec<OracleLabel> {
    dataset
        .map(|ds| {
            ds.records
                .iter()
                .filter_map(|r| {
                    r.gold.as_ref().map(|g| OracleLabel {
                        id: r.id.clone(),
                        is_anomalous: g.is_anomalous,
                        layers: g.layer_flags,
                        flip: None,
                    })
                })
                .collect()
        })
        .unwrap_or_default()
}

/// Builds the gateway for `config`, checking that the requested model exists.
pub fn build_gateway(config: &RunConfig, dataset: Option<&Dataset>) -> Result<Gateway, CliError> {
    let cache = if config.cache {
        CacheMode::Disk(config.cache_dir())
    } else {
        CacheMode::Disabled
    };
    let mut gw = Gateway::new(cache);
    let mut specs = vec![ModelSpec::mock(BUILTIN_MOCK)];
    if let Some(path) = &config.registry {
        for spec in load_registry(path)? {
            specs.retain(|s| s.name != spec.name);
            specs.push(spec);
        }
    }
    for spec in specs {
        match &spec.endpoint {
            Endpoint::Mock { fixture, oracle } => {
                let mut mock = MockBackend::from_config(fixture.as_deref(), oracle.as_ref())?;
                let from_dataset =
                    spec.name == BUILTIN_MOCK && oracle.is_none() && fixture.is_none()
                        || oracle.as_ref().is_some_and(|o| o.labels.is_none());
                if from_dataset {
                    mock.add_oracle_labels(oracle_labels(dataset));
                }
                gw.register_backend(spec, Arc::new(mock))?;
            }
            Endpoint::OpenaiCompatible { .. } => gw.register(spec)?,
        }
    }
    if gw.spec(&config.model).is_err() {
        let mut names = gw.model_names();
        names.sort();
        return Err(CliError::Usage(format!(
            "unknown model `{}`; registered models: {}",
            config.model,
            names.join(", ")
        )));
    }
    Ok(gw)
}
