//! Label distribution summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::layer::{combination_key, SceneLayer};

/// Shares are percentages. Layer, combination and layer-count shares are
/// relative to the anomalous records; the anomalous share is relative to all
/// gold-labeled records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub labeled: usize,
    pub anomalous: usize,
    pub anomalous_share_pct: f64,
    pub layer_counts: BTreeMap<SceneLayer, usize>,
    pub layer_share_pct: BTreeMap<SceneLayer, f64>,
    pub combination_counts: BTreeMap<String, usize>,
    /// Index `k - 1` holds the number of anomalous records flagging exactly `k` layers.
    pub layer_count_histogram: [usize; 4],
    pub layer_count_share_pct: [f64; 4],
    /// Anomalous records with no layer attributed.
    pub unattributed: usize,
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

pub fn stats(dataset: &Dataset) -> DatasetStats {
    let mut labeled = 0;
    let mut anomalous = 0;
    let mut layer_counts: BTreeMap<SceneLayer, usize> =
        SceneLayer::ALL.iter().map(|l| (*l, 0)).collect();
    let mut combination_counts = BTreeMap::new();
    let mut histogram = [0usize; 4];
    let mut unattributed = 0;
    for gold in dataset.records.iter().filter_map(|r| r.gold.as_ref()) {
        labeled += 1;
        if !gold.is_anomalous {
            continue;
        }
        anomalous += 1;
        for l in gold.layer_flags.iter() {
            *layer_counts.entry(l).or_default() += 1;
        }
        *combination_counts
            .entry(combination_key(gold.layer_flags))
            .or_default() += 1;
        match gold.layer_flags.len() {
            0 => unattributed += 1,
            k => histogram[k - 1] += 1,
        }
    }
    DatasetStats {
        total: dataset.len(),
        labeled,
        anomalous,
        anomalous_share_pct: pct(anomalous, labeled),
        layer_share_pct: layer_counts
            .iter()
            .map(|(l, n)| (*l, pct(*n, anomalous)))
            .collect(),
        layer_counts,
        combination_counts,
        layer_count_share_pct: histogram.map(|n| pct(n, anomalous)),
        layer_count_histogram: histogram,
        unattributed,
    }
}
