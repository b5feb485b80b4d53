//! Batch evaluation throughput, sequential (one worker) against the rayon
//! pool. The mock backend sleeps per call to stand in for network latency, so
//! the parallel path should scale with the worker count until the model's
//! in-flight cap. Build with `--no-default-features` to bench the sequential
//! fallback alone.

use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scenelayers::datastore::{Dataset, DatasetRecord};
use scenelayers::gateway::{Backoff, CacheMode, Gateway, MockBackend, ModelSpec, OracleLabel};
use scenelayers::harness::{compute_metrics, run_batch};
use scenelayers::imageprep::synthetic_png;
use scenelayers::pipeline::{MethodConfig, MethodId};
use scenelayers::{GoldLabel, LayerSet, SceneLayer};

const ITEMS: usize = 16;

fn fixture(dir: &std::path::Path) -> (Dataset, Vec<OracleLabel>) {
    let flags: LayerSet = [SceneLayer::Street].into_iter().collect();
    let mut labels = Vec::new();
    let mut records = Vec::new();
    for i in 0..ITEMS {
        let id = format!("b{i:03}");
        let anomalous = i % 2 == 0;
        let layers = if anomalous { flags } else { LayerSet::EMPTY };
        std::fs::write(
            dir.join(format!("{id}.png")),
            synthetic_png(640, 360, i as u32),
        )
        .unwrap();
        records.push(
            DatasetRecord::new(&id, format!("{id}.png"))
                .with_gold(GoldLabel::manual(anomalous, layers)),
        );
        labels.push(OracleLabel {
            id,
            is_anomalous: anomalous,
            layers,
            flip: None,
        });
    }
    (Dataset::new(dir, records), labels)
}

fn gateway(labels: Vec<OracleLabel>) -> Gateway {
    let mock = MockBackend::new()
        .with_oracle(labels, 0.1, 1, None)
        .with_delay(Duration::from_millis(2));
    let mut spec = ModelSpec::mock("mock-oracle");
    spec.max_in_flight = 64;
    let mut gw = Gateway::new(CacheMode::Disabled).with_backoff(Backoff::none());
    gw.register_backend(spec, Arc::new(mock)).unwrap();
    gw
}

fn batch(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let (ds, labels) = fixture(dir.path());
    let gw = gateway(labels);
    let mut group = c.benchmark_group("run_batch_full");
    group.sample_size(10);
    let max = std::thread::available_parallelism()
        .map_or(4, |n| n.get())
        .max(2);
    for workers in [1, 4, max] {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            b.iter(|| {
                run_batch(
                    &gw,
                    &ds,
                    &MethodConfig::new(MethodId::Full),
                    "mock-oracle",
                    w,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let pairs: Vec<(bool, bool)> = (0..100_000u32).map(|i| (i % 3 == 0, i % 5 < 2)).collect();
    c.bench_function("compute_metrics_100k", |b| {
        b.iter(|| compute_metrics(pairs.iter().copied()))
    });
}

criterion_group!(benches, batch, metrics);
criterion_main!(benches);
