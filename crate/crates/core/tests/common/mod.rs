#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use scenelayers::datastore::{Dataset, DatasetRecord};
use scenelayers::gateway::{Backoff, CacheMode, Gateway, ModelSpec};
use scenelayers::gateway::{MockBackend, OracleLabel, ScriptRecord};
use scenelayers::imageprep::synthetic_png;
use scenelayers::{GoldLabel, LayerSet};

pub const MODEL: &str = "mock-oracle";

/// Writes one distinct PNG per label and returns a dataset over them.
pub fn dataset(dir: &Path, labels: &[OracleLabel], width: u32, height: u32) -> Dataset {
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let name = format!("{}.png", l.id);
            std::fs::write(dir.join(&name), synthetic_png(width, height, i as u32)).unwrap();
            DatasetRecord::new(&l.id, name).with_gold(GoldLabel::manual(l.is_anomalous, l.layers))
        })
        .collect();
    Dataset::new(dir, records)
}

/// `anomalous` items flagged with `flags`, then `normal` items.
pub fn labels(anomalous: usize, normal: usize, flags: LayerSet) -> Vec<OracleLabel> {
    let mut out = Vec::new();
    for i in 0..anomalous + normal {
        let is_anomalous = i < anomalous;
        out.push(OracleLabel {
            id: format!("item{i:04}"),
            is_anomalous,
            layers: if is_anomalous { flags } else { LayerSet::EMPTY },
            flip: None,
        });
    }
    out
}

pub fn gateway_with(mock: MockBackend, cache: CacheMode) -> (Gateway, Arc<MockBackend>) {
    let mock = Arc::new(mock);
    let mut gw = Gateway::new(cache).with_backoff(Backoff::none());
    gw.register_backend(ModelSpec::mock(MODEL), mock.clone())
        .unwrap();
    (gw, mock)
}

pub fn oracle(labels: Vec<OracleLabel>, error_rate: f64, cue: Option<&str>) -> MockBackend {
    MockBackend::new().with_oracle(labels, error_rate, 7, cue.map(str::to_string))
}

pub fn oracle_with_scripts(
    labels: Vec<OracleLabel>,
    scripts: Vec<ScriptRecord>,
    cue: Option<&str>,
) -> MockBackend {
    MockBackend::new()
        .with_scripts(scripts)
        .with_oracle(labels, 0.0, 7, cue.map(str::to_string))
}
