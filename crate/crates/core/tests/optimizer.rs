mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenelayers::gateway::{CacheMode, OracleLabel, QueryPurpose, ScriptRecord};
use scenelayers::harness::run_batch;
use scenelayers::pipeline::{MethodConfig, MethodId};
use scenelayers::prompt::TemplateRole;
use scenelayers::promptopt::{
    bootstrap_demos, optimize, score_report, OptBudget, OptMetric, OptimizerConfig, TRACE_FORMAT,
};
use scenelayers::{LayerSet, SceneLayer};

const CUE: &str = "CHECK-CROSS-LAYER";

fn proposal(lines: &[&str]) -> ScriptRecord {
    ScriptRecord {
        purpose: Some(QueryPurpose::InstructionProposal),
        reply: lines
            .iter()
            .map(|l| format!("INSTRUCTION: {l}\n"))
            .collect(),
        ..Default::default()
    }
}

/// Half the items answered wrongly unless the cue is present.
fn flipped(prefix: &str, n: usize) -> Vec<OracleLabel> {
    let flags: LayerSet = [SceneLayer::Infrastructure].into_iter().collect();
    (0..n)
        .map(|i| OracleLabel {
            id: format!("{prefix}{i:03}"),
            is_anomalous: i % 2 == 0,
            layers: if i % 2 == 0 { flags } else { LayerSet::EMPTY },
            flip: Some(i % 4 < 2),
        })
        .collect()
}

fn config(budget: usize, seed: u64, rewrites: usize, demos: usize) -> OptimizerConfig {
    OptimizerConfig {
        budget: OptBudget::new(budget, seed),
        rewrites,
        demo_pool: demos,
        max_demos: demos.min(2),
        metric: OptMetric::Accuracy,
        workers: 2,
    }
}

#[test]
fn cue_candidate_wins_with_perfect_dev_score() {
    let dir = tempfile::tempdir().unwrap();
    let train_labels = flipped("t", 8);
    let dev_labels = flipped("d", 8);
    let train = dataset(dir.path(), &train_labels, 640, 360);
    let dev = dataset(dir.path(), &dev_labels, 640, 360);
    let all: Vec<_> = train_labels.into_iter().chain(dev_labels).collect();
    let scripts = vec![proposal(&[&format!(
        "Before answering, {CUE}. {{{{answer_schema}}}}"
    )])];
    let (gw, _) = gateway_with(
        oracle_with_scripts(all, scripts, Some(CUE)),
        CacheMode::Memory,
    );
    let base = MethodConfig::new(MethodId::Image);
    let trace = dir.path().join("trace.jsonl");
    let result = optimize(
        &gw,
        &train,
        &dev,
        &base,
        MODEL,
        &config(4, 3, 1, 0),
        Some(&trace),
    )
    .unwrap();

    assert_eq!(result.instructions.len(), 2);
    assert_eq!(result.baseline_score, 0.5);
    assert_eq!(result.best_score, 1.0);
    assert!(result
        .program
        .get(TemplateRole::Direct)
        .unwrap()
        .instruction
        .contains(CUE));
    // Only two candidates exist; both were scored, so the budget was not the limit.
    assert_eq!(result.trials.len(), 2);
    assert!(!result.partial);

    // Exhaustive check: score each candidate independently.
    for (i, instruction) in result.instructions.iter().enumerate() {
        let mut program = base.program.clone();
        program
            .templates
            .iter_mut()
            .find(|t| t.role == TemplateRole::Direct)
            .unwrap()
            .instruction = instruction.clone();
        let cfg = MethodConfig {
            program,
            ..base.clone()
        };
        let (score, _) = score_report(
            &run_batch(&gw, &dev, &cfg, MODEL, 2).unwrap(),
            OptMetric::Accuracy,
        );
        assert_eq!(score, if i == 0 { 0.5 } else { 1.0 });
    }

    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(text.lines().next().unwrap().contains(TRACE_FORMAT));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn budget_of_one_returns_incumbent() {
    let dir = tempfile::tempdir().unwrap();
    let labels = flipped("x", 4);
    let ds = dataset(dir.path(), &labels, 640, 360);
    let scripts = vec![proposal(&[CUE])];
    let (gw, mock) = gateway_with(
        oracle_with_scripts(labels, scripts, Some(CUE)),
        CacheMode::Memory,
    );
    let base = MethodConfig::new(MethodId::Image);
    let result = optimize(&gw, &ds, &ds, &base, MODEL, &config(1, 0, 3, 2), None).unwrap();
    assert_eq!(result.program, base.program);
    assert_eq!(result.trials.len(), 1);
    assert!(mock
        .calls()
        .iter()
        .all(|c| c.purpose != QueryPurpose::InstructionProposal));
}

#[test]
fn ties_keep_the_earlier_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let labels = flipped("x", 4);
    let ds = dataset(dir.path(), &labels, 640, 360);
    let scripts = vec![proposal(&[
        &format!("first {CUE}"),
        &format!("second {CUE}"),
        &format!("third {CUE}"),
    ])];
    let (gw, _) = gateway_with(
        oracle_with_scripts(labels, scripts, Some(CUE)),
        CacheMode::Memory,
    );
    let r = optimize(
        &gw,
        &ds,
        &ds,
        &MethodConfig::new(MethodId::Image),
        MODEL,
        &config(4, 11, 3, 0),
        None,
    )
    .unwrap();
    let first_perfect = r.trials.iter().find(|t| t.score == 1.0).unwrap();
    assert_eq!(r.trials.last().unwrap().best_trial, first_perfect.trial);
    let winner = &r.instructions[first_perfect.instruction];
    assert_eq!(
        &r.program.get(TemplateRole::Direct).unwrap().instruction,
        winner
    );
}

#[test]
fn proposal_failure_and_dedup() {
    let dir = tempfile::tempdir().unwrap();
    let labels = flipped("x", 4);
    let ds = dataset(dir.path(), &labels, 640, 360);
    let base = MethodConfig::new(MethodId::Image);

    let (gw, _) = gateway_with(oracle(labels.clone(), 0.0, None), CacheMode::Memory);
    let r = optimize(&gw, &ds, &ds, &base, MODEL, &config(3, 0, 3, 0), None).unwrap();
    assert_eq!(r.instructions.len(), 1);
    assert!(r.partial || r.trials.len() == 1);

    let scripts = vec![proposal(&["same idea", "same idea", "other idea"])];
    let (gw, _) = gateway_with(
        oracle_with_scripts(labels, scripts, None),
        CacheMode::Memory,
    );
    let r = optimize(&gw, &ds, &ds, &base, MODEL, &config(3, 0, 3, 0), None).unwrap();
    assert_eq!(r.instructions.len(), 3);
}

#[test]
fn bootstrap_pool_size_and_degenerate_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels(6, 6, [SceneLayer::Street].into_iter().collect());
    let ds = dataset(dir.path(), &labels, 640, 360);
    let base = MethodConfig::new(MethodId::Text);

    let (gw, _) = gateway_with(oracle(labels.clone(), 0.0, None), CacheMode::Memory);
    let pool = bootstrap_demos(&gw, &ds, &base, MODEL, 4, 5, 2).unwrap();
    assert_eq!(pool.len(), 4);
    assert!(pool.iter().all(|d| d.input.contains("## Street layer")));
    assert_eq!(
        pool,
        bootstrap_demos(&gw, &ds, &base, MODEL, 4, 5, 2).unwrap()
    );
    let anomalous = pool
        .iter()
        .filter(|d| d.output.contains("verdict: yes"))
        .count();
    assert_eq!(anomalous, 2);

    let (gw, _) = gateway_with(oracle(labels, 1.0, None), CacheMode::Memory);
    assert!(bootstrap_demos(&gw, &ds, &base, MODEL, 4, 5, 2)
        .unwrap()
        .is_empty());
}

#[test]
fn invariants_hold_over_seeded_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let flags: LayerSet = [SceneLayer::Environment].into_iter().collect();
    let labels: Vec<OracleLabel> = (0..12)
        .map(|i| OracleLabel {
            id: format!("s{i:03}"),
            is_anomalous: i % 2 == 0,
            layers: if i % 2 == 0 { flags } else { LayerSet::EMPTY },
            flip: None,
        })
        .collect();
    let ds = dataset(dir.path(), &labels, 640, 360);
    let (train, dev) = (
        ds.with_records(ds.records[..6].to_vec()),
        ds.with_records(ds.records[6..].to_vec()),
    );

    for run in 0..50u64 {
        let mut run_labels = labels.clone();
        for l in &mut run_labels {
            l.flip = Some(rng.random_bool(0.4));
        }
        let rewrites: Vec<String> = (0..rng.random_range(0..4))
            .map(|i| {
                if rng.random_bool(0.5) {
                    format!("variant {i} {CUE}")
                } else {
                    format!("variant {i}")
                }
            })
            .collect();
        let lines: Vec<&str> = rewrites.iter().map(String::as_str).collect();
        let (gw, _) = gateway_with(
            oracle_with_scripts(run_labels, vec![proposal(&lines)], Some(CUE)),
            CacheMode::Memory,
        );
        let budget = rng.random_range(1..6);
        let metric = [
            OptMetric::F1,
            OptMetric::Accuracy,
            OptMetric::RecallWeighted,
        ][run as usize % 3];
        let cfg = OptimizerConfig {
            metric,
            ..config(budget, run, 3, 2)
        };
        let base = MethodConfig::new(MethodId::Image);
        let r = optimize(&gw, &train, &dev, &base, MODEL, &cfg, None).unwrap();

        assert!(r.trials.len() <= budget, "run {run}");
        assert!(r.best_score >= r.baseline_score, "run {run}");
        assert_eq!(r.trials[0].score, r.baseline_score);
        for w in r.trials.windows(2) {
            assert!(
                w[1].best_score >= w[0].best_score,
                "run {run}: trace not monotone"
            );
        }
        let best = r.trials.iter().map(|t| t.score).fold(f64::MIN, f64::max);
        assert_eq!(r.best_score, best, "run {run}");
        let rescored = score_report(
            &run_batch(
                &gw,
                &dev,
                &MethodConfig {
                    program: r.program.clone(),
                    ..base.clone()
                },
                MODEL,
                2,
            )
            .unwrap(),
            metric,
        )
        .0;
        assert_eq!(rescored, r.best_score, "run {run}");

        let again = optimize(&gw, &train, &dev, &base, MODEL, &cfg, None).unwrap();
        assert_eq!(again.program, r.program, "run {run}: not deterministic");
    }
}
