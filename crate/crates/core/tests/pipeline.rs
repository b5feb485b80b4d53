mod common;

use common::*;
use scenelayers::gateway::{CacheMode, QueryPurpose, ScriptRecord};
use scenelayers::harness::run_batch;
use scenelayers::imageprep::{ImageInput, ResolutionLevel};
use scenelayers::pipeline::{run_method, FailureCategory, MethodConfig, MethodId};
use scenelayers::{LayerSet, SceneLayer};

fn flags(codes: &str) -> LayerSet {
    codes
        .chars()
        .map(|c| SceneLayer::from_code(c).unwrap())
        .collect()
}

#[test]
fn call_counts_match_query_plans() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(10, 10, flags("SM"));
    let ds = dataset(dir.path(), &labels, 640, 360);
    for method in MethodId::ALL {
        let (gw, mock) = gateway_with(oracle(labels.clone(), 0.0, None), CacheMode::Disabled);
        let report = run_batch(&gw, &ds, &MethodConfig::new(method), MODEL, 4).unwrap();
        assert_eq!(mock.call_count(), 20 * method.planned_queries(), "{method}");
        assert_eq!(report.efficiency.queries, 20 * method.planned_queries());
        assert_eq!(report.error_count, 0, "{method}");
        assert_eq!(report.metrics.accuracy, 1.0, "{method}");
    }
}

#[test]
fn query_purposes_follow_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(1, 0, flags("I"));
    let ds = dataset(dir.path(), &labels, 64, 36);
    let image = ImageInput::from_path("item0000", ds.image_path(&ds.records[0])).unwrap();
    let (gw, _) = gateway_with(oracle(labels, 0.0, None), CacheMode::Disabled);

    let purposes = |m: MethodId| -> Vec<QueryPurpose> {
        run_method(&gw, &MethodConfig::new(m), &image, MODEL, "item0000")
            .queries
            .iter()
            .map(|q| q.purpose)
            .collect()
    };
    assert_eq!(
        purposes(MethodId::ImageBaseline),
        vec![QueryPurpose::Direct]
    );
    assert_eq!(
        purposes(MethodId::Baseline),
        vec![QueryPurpose::SceneDescription, QueryPurpose::Evaluation]
    );
    let mut layered: Vec<QueryPurpose> =
        SceneLayer::ALL.map(QueryPurpose::LayerExtraction).to_vec();
    layered.push(QueryPurpose::Evaluation);
    assert_eq!(purposes(MethodId::Full), layered);
}

#[test]
fn text_methods_never_send_the_image_to_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(1, 1, flags("E"));
    let ds = dataset(dir.path(), &labels, 64, 36);
    for (method, image_in_eval) in [
        (MethodId::Text, false),
        (MethodId::TextBaseline, false),
        (MethodId::Full, true),
        (MethodId::Baseline, true),
    ] {
        let (gw, mock) = gateway_with(oracle(labels.clone(), 0.0, None), CacheMode::Disabled);
        run_batch(&gw, &ds, &MethodConfig::new(method), MODEL, 1).unwrap();
        for call in mock
            .calls()
            .iter()
            .filter(|c| c.purpose == QueryPurpose::Evaluation)
        {
            assert_eq!(call.image_digest.is_some(), image_in_eval, "{method}");
            assert!(call.user.contains("layer") || !method.layered());
        }
    }
}

#[test]
fn layered_evaluation_sees_every_layer_section() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(1, 0, flags("S"));
    let ds = dataset(dir.path(), &labels, 64, 36);
    let (gw, mock) = gateway_with(oracle(labels, 0.0, None), CacheMode::Disabled);
    let report = run_batch(&gw, &ds, &MethodConfig::new(MethodId::Full), MODEL, 1).unwrap();
    let eval = mock
        .calls()
        .into_iter()
        .find(|c| c.purpose == QueryPurpose::Evaluation)
        .unwrap();
    for layer in SceneLayer::ALL {
        assert!(
            eval.user
                .contains(&format!("## {} layer", layer.display_name())),
            "{layer}"
        );
    }
    let scene = report.items[0].result.scene.as_ref().unwrap();
    assert!(eval.user.contains(scene.aggregate_text()));
}

#[test]
fn one_failing_layer_fails_only_that_item() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(2, 2, flags("M"));
    let ds = dataset(dir.path(), &labels, 64, 36);
    let script = ScriptRecord {
        item: Some("item0001".into()),
        purpose: Some(QueryPurpose::LayerExtraction(SceneLayer::Environment)),
        always_fail: true,
        ..Default::default()
    };
    let (gw, _) = gateway_with(
        oracle_with_scripts(labels, vec![script], None),
        CacheMode::Disabled,
    );
    let report = run_batch(&gw, &ds, &MethodConfig::new(MethodId::Full), MODEL, 2).unwrap();
    assert_eq!(report.error_count, 1);
    let failed = &report.items[1].result;
    assert_eq!(failed.item_id, "item0001");
    let err = failed.error.as_ref().unwrap();
    assert_eq!(err.category, FailureCategory::Gateway);
    assert!(err.message.contains("Environment"), "{}", err.message);
    assert_eq!(report.metrics.total(), 3);
}

#[test]
fn unparseable_verdict_is_an_item_error_with_raw_reply() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(1, 0, flags("S"));
    let ds = dataset(dir.path(), &labels, 64, 36);
    let script = ScriptRecord {
        purpose: Some(QueryPurpose::Direct),
        reply: "I would rather not say.".into(),
        ..Default::default()
    };
    let (gw, _) = gateway_with(
        oracle_with_scripts(labels, vec![script], None),
        CacheMode::Disabled,
    );
    let report = run_batch(
        &gw,
        &ds,
        &MethodConfig::new(MethodId::ImageBaseline),
        MODEL,
        1,
    )
    .unwrap();
    let err = report.items[0].result.error.as_ref().unwrap();
    assert_eq!(err.category, FailureCategory::Unparseable);
    assert_eq!(err.raw_reply.as_deref(), Some("I would rather not say."));
}

#[test]
fn resolution_sets_the_height_sent_on_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(1, 0, flags("S"));
    let ds = dataset(dir.path(), &labels, 1280, 720);
    for level in ResolutionLevel::ALL {
        let (gw, mock) = gateway_with(oracle(labels.clone(), 0.0, None), CacheMode::Disabled);
        let config = MethodConfig::new(MethodId::ImageBaseline).with_resolution(level);
        run_batch(&gw, &ds, &config, MODEL, 1).unwrap();
        let (w, h) = mock.calls()[0].image_size.unwrap();
        assert_eq!(h, level.height());
        assert_eq!(
            w,
            (f64::from(level.height()) * 1280.0 / 720.0).round() as u32
        );
    }
}
