//! Batch evaluation: per-item runs, metrics, efficiency, failure breakdowns
//! and resolution sweeps.

mod metrics;
mod report;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{Dataset, DatasetRecord};
use crate::exec::{par_map, with_workers};
use crate::gateway::{Gateway, GatewayError};
use crate::imageprep::{ImageInput, ResolutionLevel};
use crate::label::GoldLabel;
use crate::layer::combination_key;
use crate::pipeline::{run_method, ItemResult, MethodConfig, MethodId, PipelineError};

pub use metrics::{compute_metrics, Metrics};
pub use report::{
    emit_report, load_report, summary_columns, summary_row, EmittedFiles, ReportFormat,
    ITEMS_FORMAT,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("item `{0}` has no gold label")]
    MissingGold(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("resolution sweep needs at least one level")]
    EmptySweep,
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format {
        path: std::path::PathBuf,
        reason: String,
    },
}

/// One evaluated item with its gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub gold: GoldLabel,
    #[serde(flatten)]
    pub result: ItemResult,
}

impl ItemRecord {
    pub fn correct(&self) -> Option<bool> {
        self.result.predicted().map(|p| p == self.gold.is_anomalous)
    }
}

/// Token, latency and cost figures. Per-query means are over executed queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub queries: usize,
    pub mean_queries_per_item: f64,
    pub mean_latency_s_per_query: f64,
    pub mean_item_latency_s: f64,
    pub mean_input_tokens_per_query: f64,
    pub mean_output_tokens_per_query: f64,
    pub mean_tokens_per_query: f64,
    pub total_tokens: u64,
    /// Mean image tokens over queries that carried an image.
    pub mean_image_tokens: f64,
    pub total_cost: f64,
    pub tokens_estimated: bool,
    pub cache_hits: usize,
}

impl Efficiency {
    fn from_results<'a>(results: impl IntoIterator<Item = &'a ItemResult>) -> Self {
        let mut e = Efficiency::default();
        let (mut items, mut latency, mut input, mut output, mut image, mut image_queries) =
            (0usize, 0.0, 0u64, 0u64, 0u64, 0usize);
        let mut item_latency = 0.0;
        for r in results {
            items += 1;
            item_latency += r.total_latency_s;
            for q in &r.queries {
                e.queries += 1;
                latency += q.latency_s;
                input += q.input_tokens;
                output += q.output_tokens;
                if q.image_tokens > 0 {
                    image += q.image_tokens;
                    image_queries += 1;
                }
                e.total_cost += q.cost;
                e.tokens_estimated |= q.tokens_estimated;
                e.cache_hits += usize::from(q.cache_hit);
            }
        }
        let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        e.mean_queries_per_item = per(e.queries as f64, items);
        e.mean_latency_s_per_query = per(latency, e.queries);
        e.mean_item_latency_s = per(item_latency, items);
        e.mean_input_tokens_per_query = per(input as f64, e.queries);
        e.mean_output_tokens_per_query = per(output as f64, e.queries);
        e.total_tokens = input + output;
        e.mean_tokens_per_query = per(e.total_tokens as f64, e.queries);
        e.mean_image_tokens = per(image as f64, image_queries);
        e
    }
}

/// Misprediction rate for one gold layer combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureRate {
    pub items: usize,
    pub failures: usize,
    pub rate_pct: f64,
}

/// Groups items by the combination key of their gold layer flags and reports
/// the share mispredicted. Items that errored are left out.
pub fn failure_rates(items: &[ItemRecord]) -> BTreeMap<String, FailureRate> {
    let mut out: BTreeMap<String, FailureRate> = BTreeMap::new();
    for item in items {
        let Some(correct) = item.correct() else {
            continue;
        };
        let e = out
            .entry(combination_key(item.gold.layer_flags))
            .or_insert(FailureRate {
                items: 0,
                failures: 0,
                rate_pct: 0.0,
            });
        e.items += 1;
        e.failures += usize::from(!correct);
    }
    for e in out.values_mut() {
        e.rate_pct = if e.items == 0 {
            0.0
        } else {
            100.0 * e.failures as f64 / e.items as f64
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: MethodId,
    pub model: String,
    pub resolution: ResolutionLevel,
    pub item_count: usize,
    pub error_count: usize,
    /// Over items with a verdict.
    pub metrics: Metrics,
    pub efficiency: Efficiency,
    pub failure_rates: BTreeMap<String, FailureRate>,
    /// Sorted by item id.
    #[serde(skip)]
    pub items: Vec<ItemRecord>,
}

impl RunReport {
    pub fn from_items(
        method: MethodId,
        model: &str,
        resolution: ResolutionLevel,
        mut items: Vec<ItemRecord>,
    ) -> Self {
        items.sort_by(|a, b| a.result.item_id.cmp(&b.result.item_id));
        let metrics = compute_metrics(
            items
                .iter()
                .filter_map(|i| i.result.predicted().map(|p| (p, i.gold.is_anomalous))),
        );
        RunReport {
            method,
            model: model.to_string(),
            resolution,
            item_count: items.len(),
            error_count: items.iter().filter(|i| i.result.error.is_some()).count(),
            metrics,
            efficiency: Efficiency::from_results(items.iter().map(|i| &i.result)),
            failure_rates: failure_rates(&items),
            items,
        }
    }
}

fn run_record(
    gateway: &Gateway,
    dataset: &Dataset,
    record: &DatasetRecord,
    config: &MethodConfig,
    model: &str,
) -> ItemResult {
    match ImageInput::from_path(&record.id, dataset.image_path(record)) {
        Ok(image) => run_method(gateway, config, &image, model, &record.id),
        Err(e) => ItemResult::failed(&record.id, &PipelineError::Image(e)),
    }
}

/// Runs `config` over every record with up to `workers` items in flight.
/// Item failures are recorded and excluded from metrics; they do not stop the batch.
pub fn run_batch(
    gateway: &Gateway,
    dataset: &Dataset,
    config: &MethodConfig,
    model: &str,
    workers: usize,
) -> Result<RunReport, HarnessError> {
    gateway.spec(model)?;
    let golds: HashMap<&str, &GoldLabel> = dataset
        .records
        .iter()
        .map(|r| {
            r.gold
                .as_ref()
                .map(|g| (r.id.as_str(), g))
                .ok_or_else(|| HarnessError::MissingGold(r.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let results = with_workers(workers, || {
        par_map(&dataset.records, |record| {
            run_record(gateway, dataset, record, config, model)
        })
    });
    let items = results
        .into_iter()
        .map(|result| ItemRecord {
            gold: golds[result.item_id.as_str()].clone(),
            result,
        })
        .collect();
    Ok(RunReport::from_items(
        config.method,
        model,
        config.resolution,
        items,
    ))
}

/// One batch per resolution level, in the order given.
pub fn resolution_sweep(
    gateway: &Gateway,
    dataset: &Dataset,
    config: &MethodConfig,
    model: &str,
    workers: usize,
    levels: &[ResolutionLevel],
) -> Result<Vec<RunReport>, HarnessError> {
    if levels.is_empty() {
        return Err(HarnessError::EmptySweep);
    }
    levels
        .iter()
        .map(|level| {
            run_batch(
                gateway,
                dataset,
                &config.clone().with_resolution(*level),
                model,
                workers,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{LayerSet, SceneLayer};
    use crate::verdict::AnomalyVerdict;

    fn item(id: &str, gold: bool, flags: LayerSet, predicted: Option<bool>) -> ItemRecord {
        let verdict = predicted.map(|p| AnomalyVerdict::new(p, LayerSet::EMPTY, ""));
        let error = predicted.is_none().then(|| crate::pipeline::ItemFailure {
            category: crate::pipeline::FailureCategory::Gateway,
            message: "down".into(),
            raw_reply: None,
        });
        ItemRecord {
            gold: GoldLabel::manual(gold, flags),
            result: ItemResult {
                item_id: id.into(),
                verdict,
                error,
                scene: None,
                queries: vec![],
                total_latency_s: 0.0,
                total_cost: 0.0,
            },
        }
    }

    #[test]
    fn failure_rates_by_combination() {
        let s: LayerSet = [SceneLayer::Street].into_iter().collect();
        let em: LayerSet = [SceneLayer::Environment, SceneLayer::MovableObjects]
            .into_iter()
            .collect();
        let items = vec![
            item("1", true, s, Some(true)),
            item("2", true, s, Some(false)),
            item("3", true, em, Some(false)),
            item("4", false, LayerSet::EMPTY, Some(false)),
            item("5", true, em, None),
        ];
        let fr = failure_rates(&items);
        assert_eq!(
            fr["S"],
            FailureRate {
                items: 2,
                failures: 1,
                rate_pct: 50.0
            }
        );
        assert_eq!(
            fr["E.M"],
            FailureRate {
                items: 1,
                failures: 1,
                rate_pct: 100.0
            }
        );
        assert_eq!(fr["none"].rate_pct, 0.0);
    }

    #[test]
    fn report_excludes_errors_from_metrics() {
        let s: LayerSet = [SceneLayer::Street].into_iter().collect();
        let items = vec![
            item("b", true, s, Some(true)),
            item("a", false, LayerSet::EMPTY, None),
        ];
        let r = RunReport::from_items(MethodId::Full, "m", ResolutionLevel::P360, items);
        assert_eq!(r.items[0].result.item_id, "a");
        assert_eq!((r.item_count, r.error_count, r.metrics.total()), (2, 1, 1));
        assert_eq!(r.metrics.accuracy, 1.0);
    }
}
