mod common;

use std::collections::BTreeMap;

use common::*;
use scenelayers::datastore::{
    autolabel, export_finetune, load_manifest, save_manifest, sidecar_path, AutolabelOptions,
    Decision, ExportMode, ExportOptions, ExportSummary, LabelStore, ReviewState, ReviewSubmission,
};
use scenelayers::gateway::CacheMode;
use scenelayers::pipeline::{MethodConfig, MethodId};
use scenelayers::{LayerSet, Provenance, SceneLayer};

fn street() -> LayerSet {
    [SceneLayer::Street].into_iter().collect()
}

#[test]
fn autolabel_resumes_after_interruption() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(5, 5, street());
    let mut ds = dataset(dir.path(), &labels, 640, 360);
    for r in &mut ds.records {
        r.gold = None;
    }
    let checkpoint = dir.path().join("annotations.jsonl");
    let config = MethodConfig::new(MethodId::Full);

    let (gw, mock) = gateway_with(oracle(labels.clone(), 0.0, None), CacheMode::Disabled);
    let opts = AutolabelOptions {
        limit: Some(6),
        workers: 3,
        checkpoint: Some(checkpoint.clone()),
        ..Default::default()
    };
    let first = autolabel(&gw, &ds, &config, MODEL, &opts).unwrap();
    assert_eq!((first.processed, first.errors), (6, 0));
    assert_eq!(mock.call_count(), 6 * 5);

    // A fresh process: only the checkpoint carries progress.
    let (gw, mock) = gateway_with(oracle(labels.clone(), 0.0, None), CacheMode::Disabled);
    let opts = AutolabelOptions {
        workers: 3,
        checkpoint: Some(checkpoint.clone()),
        ..Default::default()
    };
    let second = autolabel(&gw, &ds, &config, MODEL, &opts).unwrap();
    assert_eq!(second.resumed, 6);
    assert_eq!(second.plan.skipped, 6);
    assert_eq!(second.processed, 4);
    assert_eq!(mock.call_count(), 4 * 5);

    for (r, l) in second.dataset.records.iter().zip(&labels) {
        let gold = r.gold.as_ref().unwrap();
        assert_eq!(gold.provenance, Provenance::Model);
        assert_eq!(gold.is_anomalous, l.is_anomalous, "{}", r.id);
        assert!(r.annotation.as_ref().unwrap().scene.is_some());
    }

    let manifest = dir.path().join("labeled.jsonl");
    save_manifest(&second.dataset, &manifest).unwrap();
    assert_eq!(load_manifest(&manifest).unwrap(), second.dataset);
}

#[test]
fn autolabel_dry_run_and_force() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(2, 2, street());
    let ds = dataset(dir.path(), &labels, 640, 360);
    let config = MethodConfig::new(MethodId::ImageBaseline);
    let (gw, mock) = gateway_with(oracle(labels, 0.0, None), CacheMode::Disabled);
    let plan = autolabel(
        &gw,
        &ds,
        &config,
        MODEL,
        &AutolabelOptions {
            dry_run: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        (
            plan.plan.pending.len(),
            plan.plan.planned_queries,
            plan.processed
        ),
        (4, 4, 0)
    );
    assert_eq!(mock.call_count(), 0);

    let done = autolabel(
        &gw,
        &ds,
        &config,
        MODEL,
        &AutolabelOptions {
            workers: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let again = autolabel(
        &gw,
        &done.dataset,
        &config,
        MODEL,
        &AutolabelOptions::default(),
    )
    .unwrap();
    assert_eq!(again.processed, 0);
    let forced = autolabel(
        &gw,
        &done.dataset,
        &config,
        MODEL,
        &AutolabelOptions {
            force: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(forced.processed, 4);
}

#[test]
fn autolabel_stores_item_errors() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(1, 1, street());
    let mut ds = dataset(dir.path(), &labels, 640, 360);
    ds.records[1].image = "missing.png".into();
    let (gw, _) = gateway_with(oracle(labels, 0.0, None), CacheMode::Disabled);
    let out = autolabel(
        &gw,
        &ds,
        &MethodConfig::new(MethodId::Image),
        MODEL,
        &AutolabelOptions::default(),
    )
    .unwrap();
    assert_eq!(out.errors, 1);
    assert!(out.dataset.records[1]
        .annotation
        .as_ref()
        .unwrap()
        .error
        .is_some());
}

fn reviewed_store(dir: &std::path::Path, reviewed: usize, total: usize) -> LabelStore {
    let labels = labels(total / 2, total - total / 2, street());
    let ds = dataset(dir, &labels, 640, 360);
    let (gw, _) = gateway_with(oracle(labels, 0.0, None), CacheMode::Disabled);
    let mut labeled = autolabel(
        &gw,
        &ds,
        &MethodConfig::new(MethodId::Full),
        MODEL,
        &AutolabelOptions::default(),
    )
    .unwrap()
    .dataset;
    for r in &mut labeled.records {
        r.gold = None;
    }
    let mut store = LabelStore::from_dataset(labeled, &dir.join("reviews.jsonl")).unwrap();
    for i in 0..reviewed {
        let sub = ReviewSubmission {
            reviewer: "r".into(),
            decision: Decision::Accept,
            corrected: None,
            descriptions: BTreeMap::new(),
            note: None,
        };
        store.review(&format!("item{i:04}"), &sub).unwrap();
    }
    store
}

#[test]
fn export_counts_by_mode_and_excludes_unreviewed() {
    let dir = tempfile::tempdir().unwrap();
    let store = reviewed_store(dir.path(), 4, 5);
    let ds = store.dataset();
    assert_eq!(
        ds.records
            .iter()
            .filter(|r| r.review == ReviewState::Unreviewed)
            .count(),
        1
    );

    let out = dir.path().join("ft/pipeline.jsonl");
    let summary = export_finetune(ds, &out, &ExportOptions::new(ExportMode::Pipeline)).unwrap();
    assert_eq!(
        (
            summary.items,
            summary.conversations,
            summary.excluded_unreviewed
        ),
        (4, 8, 1)
    );
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    for pair in lines.chunks(2) {
        let describe = &pair[0]["messages"];
        assert!(describe[1]["content"]
            .as_str()
            .unwrap()
            .contains("## Street layer"));
        let verdict = &pair[1]["messages"];
        assert!(verdict[0]["content"][1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert!(verdict[1]["content"].as_str().unwrap().contains("verdict:"));
    }
    let meta: ExportSummary =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(&out)).unwrap()).unwrap();
    assert_eq!(meta, summary);

    let single = dir.path().join("ft/single.jsonl");
    let s = export_finetune(ds, &single, &ExportOptions::new(ExportMode::SingleShot)).unwrap();
    assert_eq!((s.items, s.conversations), (4, 4));
}

#[test]
fn pipeline_export_needs_descriptions() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(1, 1, street());
    let ds = dataset(dir.path(), &labels, 640, 360);
    let err = export_finetune(
        &ds,
        &dir.path().join("x.jsonl"),
        &ExportOptions::new(ExportMode::Pipeline),
    )
    .unwrap_err();
    assert!(err.to_string().contains("item0000"), "{err}");
    let s = export_finetune(
        &ds,
        &dir.path().join("y.jsonl"),
        &ExportOptions::new(ExportMode::SingleShot),
    )
    .unwrap();
    assert_eq!(s.conversations, 2);
}
