//! Budgeted search over instruction and demo combinations for the
//! verdict-producing template of a program.
//!
//! 1. Demos are bootstrapped from training items the current program gets right.
//! 2. Alternative instructions are proposed by the model in one call.
//! 3. Candidates (instruction, demo subset) are scored on the dev split; the
//!    unmodified program is always candidate 0, so the result never scores
//!    below it on dev. One budget unit is one full dev scoring.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::Dataset;
use crate::gateway::{ChatRequest, Gateway, QueryPurpose};
use crate::harness::{compute_metrics, run_batch, HarnessError, ItemRecord, Metrics, RunReport};
use crate::pipeline::MethodConfig;
use crate::prompt::{default_assets, Demo, PromptProgram, PromptTemplate, TemplateRole};

pub const TRACE_FORMAT: &str = "scenelayers/opt-trace";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptMetric {
    #[default]
    F1,
    /// F-beta with beta = 2.
    RecallWeighted,
    Accuracy,
}

impl OptMetric {
    pub fn score(self, m: &Metrics) -> f64 {
        match self {
            OptMetric::F1 => m.f1,
            OptMetric::RecallWeighted => m.f_beta(2.0),
            OptMetric::Accuracy => m.accuracy,
        }
    }
}

impl std::str::FromStr for OptMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f1" => Ok(OptMetric::F1),
            "recall_weighted" | "f2" => Ok(OptMetric::RecallWeighted),
            "accuracy" => Ok(OptMetric::Accuracy),
            other => Err(format!(
                "unknown metric `{other}` (expected f1, recall_weighted or accuracy)"
            )),
        }
    }
}

/// Search limits. Every count must be positive; the seed fixes every random choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptBudget {
    /// Distinct candidate programs considered, the incumbent included.
    pub max_candidates: usize,
    /// Dev-split scorings, the incumbent included.
    pub max_evaluations: usize,
    pub seed: u64,
}

impl OptBudget {
    pub fn new(max_evaluations: usize, seed: u64) -> Self {
        OptBudget {
            max_candidates: max_evaluations,
            max_evaluations,
            seed,
        }
    }

    fn limit(&self) -> usize {
        self.max_candidates.min(self.max_evaluations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub budget: OptBudget,
    /// Instruction rewrites requested from the model.
    pub rewrites: usize,
    /// Demos harvested into the pool.
    pub demo_pool: usize,
    /// Maximum demos attached to one candidate.
    pub max_demos: usize,
    pub metric: OptMetric,
    pub workers: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            budget: OptBudget::new(8, 0),
            rewrites: 3,
            demo_pool: 4,
            max_demos: 2,
            metric: OptMetric::F1,
            workers: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("optimizer budget counts must all be positive")]
    ZeroBudget,
    #[error("train and dev splits must both be non-empty")]
    EmptySplit,
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub instruction: usize,
    pub demos: Vec<usize>,
    pub score: f64,
    pub metrics: Metrics,
    pub errors: usize,
    pub best_score: f64,
    pub best_trial: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizerResult {
    pub program: PromptProgram,
    pub best_score: f64,
    pub baseline_score: f64,
    pub trials: Vec<TrialRecord>,
    pub instructions: Vec<String>,
    pub demo_pool: Vec<Demo>,
    /// Stopped on the budget with unexplored candidates left.
    pub partial: bool,
}

/// Dev score where errored items count as mispredictions.
pub fn score_report(report: &RunReport, metric: OptMetric) -> (f64, Metrics) {
    let pairs = report.items.iter().map(|i| {
        let gold = i.gold.is_anomalous;
        (i.result.predicted().unwrap_or(!gold), gold)
    });
    let m = compute_metrics(pairs);
    (metric.score(&m), m)
}

fn demo_from(item: &ItemRecord) -> Option<Demo> {
    let verdict = item.result.verdict.as_ref()?;
    let input = item
        .result
        .scene
        .as_ref()
        .map(|s| s.aggregate_text().to_string())
        .unwrap_or_else(|| "(scene shown as an image)".to_string());
    Some(Demo {
        input,
        output: verdict.render(),
    })
}

/// Correctly answered items of a finished run as demos, alternating classes
/// (anomalous first) in a seeded order, at most `k` of them.
pub fn harvest_demos(report: &RunReport, k: usize, seed: u64) -> Vec<Demo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<&ItemRecord> = Vec::new();
    let mut neg: Vec<&ItemRecord> = Vec::new();
    for item in report.items.iter().filter(|i| i.correct() == Some(true)) {
        if item.gold.is_anomalous {
            pos.push(item);
        } else {
            neg.push(item);
        }
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out = Vec::with_capacity(k);
    let (mut p, mut n) = (pos.into_iter(), neg.into_iter());
    while out.len() < k {
        let next = if out.len() % 2 == 0 {
            p.next().or_else(|| n.next())
        } else {
            n.next().or_else(|| p.next())
        };
        match next.and_then(demo_from) {
            Some(d) => out.push(d),
            None => break,
        }
    }
    out
}

/// Runs the unoptimized program over `train` and harvests up to `k` demos
/// for its verdict template.
pub fn bootstrap_demos(
    gateway: &Gateway,
    train: &Dataset,
    config: &MethodConfig,
    model: &str,
    k: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Demo>, OptimizeError> {
    if train.is_empty() {
        return Err(OptimizeError::EmptySplit);
    }
    let report = run_batch(gateway, train, config, model, workers)?;
    let demos = harvest_demos(&report, k, seed);
    if demos.is_empty() && k > 0 {
        log::warn!("no training item was answered correctly; searching over instructions only");
    }
    Ok(demos)
}

fn placeholders(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start..].find("}}") else {
            break;
        };
        let ph = &rest[start..start + len + 2];
        if !out.iter().any(|p| p == ph) {
            out.push(ph.to_string());
        }
        rest = &rest[start + len + 2..];
    }
    out
}

/// Parses `INSTRUCTION:` lines, restoring any placeholder of `base` a proposal dropped.
pub fn parse_proposals(reply: &str, base: &str) -> Vec<String> {
    let needed = placeholders(base);
    reply
        .lines()
        .filter_map(|l| {
            let l = l.trim().trim_start_matches(['-', '*', ' ']);
            let body = l
                .strip_prefix("INSTRUCTION:")
                .or_else(|| l.strip_prefix("Instruction:"))?
                .trim();
            (!body.is_empty()).then(|| {
                let mut text = body.to_string();
                for ph in &needed {
                    if !text.contains(ph.as_str()) {
                        text.push_str("\n\n");
                        text.push_str(ph);
                    }
                }
                text
            })
        })
        .collect()
}

fn failure_summary(report: &RunReport, limit: usize) -> String {
    let lines: Vec<String> = report
        .items
        .iter()
        .filter(|i| i.correct() == Some(false))
        .take(limit)
        .map(|i| {
            let expected = if i.gold.is_anomalous {
                format!("anomalous (layers: {})", i.gold.layer_flags.codes())
            } else {
                "normal".to_string()
            };
            let got = if i.gold.is_anomalous {
                "normal"
            } else {
                "anomalous"
            };
            format!(
                "- item {}: expected {expected}, program answered {got}",
                i.result.item_id
            )
        })
        .collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        lines.join("\n")
    }
}

/// The current instruction as candidate 0, then up to `n` distinct model
/// rewrites. A failed proposal call leaves only the current instruction.
pub fn propose_instructions(
    gateway: &Gateway,
    model: &str,
    base: &PromptTemplate,
    baseline: &RunReport,
    n: usize,
) -> Vec<String> {
    let mut out = vec![base.instruction.clone()];
    if n == 0 {
        return out;
    }
    let asset = default_assets()["propose_instruction"];
    let step = match base.role {
        TemplateRole::Direct => "classify the scene directly from the image",
        TemplateRole::Evaluation => "classify the scene from its description",
        _ => "describe the scene",
    };
    let user = PromptTemplate::new("propose_instruction", TemplateRole::Direct, asset).render(&[
        ("step", step),
        ("instruction", base.instruction.trim()),
        ("failures", &failure_summary(baseline, 5)),
        ("n", &n.to_string()),
    ]);
    let request = ChatRequest::new(model, user).with_trace(None, QueryPurpose::InstructionProposal);
    match gateway.complete(&request) {
        Ok(reply) => {
            for p in parse_proposals(&reply.text, &base.instruction) {
                if out.len() > n {
                    break;
                }
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        Err(e) => {
            log::warn!("instruction proposal failed, keeping the current instruction only: {e}")
        }
    }
    out
}

fn target_role(program: &PromptProgram) -> Result<TemplateRole, OptimizeError> {
    [TemplateRole::Evaluation, TemplateRole::Direct]
        .into_iter()
        .find(|r| program.get(*r).is_ok())
        .ok_or(OptimizeError::Prompt(
            crate::prompt::PromptError::MissingRole(TemplateRole::Evaluation),
        ))
}

fn candidate_program(
    base: &PromptProgram,
    role: TemplateRole,
    instruction: &str,
    demos: Vec<Demo>,
) -> PromptProgram {
    let mut program = base.clone();
    let t = program
        .templates
        .iter_mut()
        .find(|t| t.role == role)
        .expect("role present");
    t.instruction = instruction.to_string();
    t.demos = demos;
    program
}

fn write_trace(path: &Path, trials: &[TrialRecord]) -> Result<(), OptimizeError> {
    let io = |source| OptimizeError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = fs::File::create(path).map_err(io)?;
    let header = serde_json::json!({"format": TRACE_FORMAT, "version": 1});
    writeln!(f, "{header}").map_err(io)?;
    for t in trials {
        writeln!(f, "{}", serde_json::to_string(t).expect("trial")).map_err(io)?;
    }
    Ok(())
}

/// Outcome of [`search`].
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub program: PromptProgram,
    pub best_score: f64,
    pub incumbent_score: f64,
    pub trials: Vec<TrialRecord>,
    /// Stopped on the budget with unexplored candidates left.
    pub partial: bool,
}

/// Scores the incumbent (`base`, candidate 0) and then sampled
/// (instruction, demo subset) candidates on `dev`, returning the argmax.
/// Ties keep the earlier candidate. Instruction 0 must be the incumbent's.
#[allow(clippy::too_many_arguments)]
pub fn search(
    gateway: &Gateway,
    base: &MethodConfig,
    model: &str,
    instructions: &[String],
    pool: &[Demo],
    dev: &Dataset,
    metric: OptMetric,
    max_demos: usize,
    budget: &OptBudget,
    workers: usize,
) -> Result<SearchOutcome, OptimizeError> {
    if budget.max_candidates == 0 || budget.max_evaluations == 0 {
        return Err(OptimizeError::ZeroBudget);
    }
    if dev.is_empty() {
        return Err(OptimizeError::EmptySplit);
    }
    let role = target_role(&base.program)?;
    let incumbent = run_batch(gateway, dev, base, model, workers)?;
    let (incumbent_score, metrics) = score_report(&incumbent, metric);
    let mut trials = vec![TrialRecord {
        trial: 0,
        instruction: 0,
        demos: Vec::new(),
        score: incumbent_score,
        metrics,
        errors: incumbent.error_count,
        best_score: incumbent_score,
        best_trial: 0,
    }];
    let mut best = (incumbent_score, 0usize, base.program.clone());

    let instructions: Vec<&String> = if instructions.is_empty() {
        vec![&base.program.get(role)?.instruction]
    } else {
        instructions.iter().collect()
    };
    let max_k = max_demos.min(pool.len());
    let space = instructions.len() * (0..=max_k).map(|s| binomial(pool.len(), s)).sum::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut seen: HashSet<(usize, Vec<usize>)> = HashSet::from([(0, Vec::new())]);
    while trials.len() < budget.limit() && seen.len() < space {
        let (instruction, demos) = loop {
            let instruction = rng.random_range(0..instructions.len());
            let size = rng.random_range(0..=max_k);
            let mut demos: Vec<usize> = sample(&mut rng, pool.len(), size).into_vec();
            demos.sort_unstable();
            if seen.insert((instruction, demos.clone())) {
                break (instruction, demos);
            }
        };
        let program = candidate_program(
            &base.program,
            role,
            instructions[instruction],
            demos.iter().map(|i| pool[*i].clone()).collect(),
        );
        let config = MethodConfig {
            program: program.clone(),
            ..base.clone()
        };
        let report = run_batch(gateway, dev, &config, model, workers)?;
        let (score, metrics) = score_report(&report, metric);
        let trial = trials.len();
        if score > best.0 {
            best = (score, trial, program);
        }
        trials.push(TrialRecord {
            trial,
            instruction,
            demos,
            score,
            metrics,
            errors: report.error_count,
            best_score: best.0,
            best_trial: best.1,
        });
    }
    Ok(SearchOutcome {
        program: best.2,
        best_score: best.0,
        incumbent_score,
        partial: seen.len() < space,
        trials,
    })
}

/// Bootstrap, propose and search in sequence. The score trace is written to
/// `trace` when given.
pub fn optimize(
    gateway: &Gateway,
    train: &Dataset,
    dev: &Dataset,
    base: &MethodConfig,
    model: &str,
    cfg: &OptimizerConfig,
    trace: Option<&Path>,
) -> Result<OptimizerResult, OptimizeError> {
    if cfg.budget.max_candidates == 0 || cfg.budget.max_evaluations == 0 {
        return Err(OptimizeError::ZeroBudget);
    }
    if train.is_empty() || dev.is_empty() {
        return Err(OptimizeError::EmptySplit);
    }
    let role = target_role(&base.program)?;
    let base_template = base.program.get(role)?.clone();
    let (instructions, pool) = if cfg.budget.limit() > 1 {
        let pool = bootstrap_demos(
            gateway,
            train,
            base,
            model,
            cfg.demo_pool,
            cfg.budget.seed,
            cfg.workers,
        )?;
        let baseline = run_batch(gateway, dev, base, model, cfg.workers)?;
        (
            propose_instructions(gateway, model, &base_template, &baseline, cfg.rewrites),
            pool,
        )
    } else {
        (vec![base_template.instruction.clone()], Vec::new())
    };
    let outcome = search(
        gateway,
        base,
        model,
        &instructions,
        &pool,
        dev,
        cfg.metric,
        cfg.max_demos,
        &cfg.budget,
        cfg.workers,
    )?;
    if let Some(path) = trace {
        write_trace(path, &outcome.trials)?;
    }
    Ok(OptimizerResult {
        program: outcome.program,
        best_score: outcome.best_score,
        baseline_score: outcome.incumbent_score,
        trials: outcome.trials,
        instructions,
        demo_pool: pool,
        partial: outcome.partial,
    })
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proposals_keep_placeholders() {
        let base = "Judge {{scene}} carefully.\n\n{{answer_schema}}";
        let got = parse_proposals("noise\nINSTRUCTION: Look twice at {{scene}}.\n- INSTRUCTION: Be strict.\nINSTRUCTION:   ", base);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], "Look twice at {{scene}}.\n\n{{answer_schema}}");
        assert_eq!(got[1], "Be strict.\n\n{{scene}}\n\n{{answer_schema}}");
    }

    #[test]
    fn binomials() {
        assert_eq!((binomial(6, 0), binomial(6, 2), binomial(3, 5)), (1, 15, 0));
    }

    #[test]
    fn metric_parse() {
        assert_eq!(
            "f2".parse::<OptMetric>().unwrap(),
            OptMetric::RecallWeighted
        );
        assert!("auc".parse::<OptMetric>().is_err());
    }
}
