use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use scenelayers::datastore::{
    autolabel, balanced_subset, export_finetune, load_manifest, load_manifest_with,
    read_review_log, replay, save_manifest, stats, AutolabelOptions, Dataset, DatasetStats,
    ExportMode, ExportOptions, LoadOptions, SplitSpec,
};
use scenelayers::harness::{
    emit_report, load_report, resolution_sweep, run_batch, summary_columns, summary_row,
    ReportFormat, RunReport,
};
use scenelayers::imageprep::{resize, ImageInput, ResolutionLevel};
use scenelayers::pipeline::{extract_layers, MethodConfig, MethodId};
use scenelayers::prompt::PromptProgram;
use scenelayers::promptopt::{optimize, OptBudget, OptMetric, OptimizerConfig};
use scenelayers::{aggregate, SceneLayer};
use scenelayers_curation::ServiceConfig;
use serde::Serialize;
use serde_json::json;

use crate::args::Command;
use crate::config::{FileConfig, RunConfig};
use crate::plan::{plan, QueryPlan};
use crate::registry::build_gateway;
use crate::CliError;

pub const OUTPUTS_FORMAT: &str = "scenelayers/outputs";

/// Tracks files written under a run directory and lists them in `outputs.json`.
struct Outputs {
    root: PathBuf,
    files: BTreeSet<PathBuf>,
}

fn out_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Output(format!("{}: {e}", path.display()))
}

impl Outputs {
    fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(out_err(root))?;
        Ok(Outputs {
            root: root.to_path_buf(),
            files: BTreeSet::new(),
        })
    }

    fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.files.insert(rel.to_path_buf());
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        let text = serde_json::to_string_pretty(value).expect("serializable output") + "\n";
        std::fs::write(&path, text).map_err(out_err(&path))?;
        self.record(&path);
        Ok(path)
    }

    fn finish(mut self, command: &str) -> Result<(), CliError> {
        let files: Vec<String> = self
            .files
            .iter()
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .collect();
        let manifest =
            json!({"format": OUTPUTS_FORMAT, "version": 1, "command": command, "files": files});
        self.files.clear();
        self.write_json("outputs.json", &manifest)?;
        Ok(())
    }
}

fn file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    path.map_or_else(|| Ok(FileConfig::default()), FileConfig::load)
}

fn load_dataset(
    config: &RunConfig,
    check_images: bool,
    limit: Option<usize>,
) -> Result<Dataset, CliError> {
    let ds = load_manifest_with(config.dataset()?, LoadOptions { check_images })?;
    Ok(match limit {
        Some(n) if n < ds.len() => ds.with_records(ds.records[..n].to_vec()),
        _ => ds,
    })
}

fn method_config(config: &RunConfig) -> Result<MethodConfig, CliError> {
    let base = MethodConfig::new(config.method).with_resolution(config.resolution);
    match &config.prompts {
        Some(dir) => {
            let (program, saved_for) = PromptProgram::load_dir(dir)?;
            if saved_for != config.method.as_str() {
                log::warn!(
                    "prompt assets in {} were written for `{saved_for}`, running `{}`",
                    dir.display(),
                    config.method
                );
            }
            Ok(base.with_program(program)?)
        }
        None => {
            if config.method.optimized() {
                log::warn!(
                    "`{}` without --prompts runs the default (unoptimized) prompts",
                    config.method
                );
            }
            Ok(base)
        }
    }
}

fn print_table(reports: &[&RunReport]) {
    let header = summary_columns();
    let rows: Vec<Vec<String>> = reports.iter().map(|r| summary_row(r)).collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    println!("{}", line(header.to_vec()));
    for r in &rows {
        println!("{}", line(r.iter().map(String::as_str).collect()));
    }
}

fn fail_if_all_errored(report: &RunReport) -> Result<(), CliError> {
    if report.item_count > 0 && report.error_count == report.item_count {
        let first = report
            .items
            .iter()
            .find_map(|i| i.result.error.as_ref())
            .map(|e| e.message.clone());
        return Err(CliError::Backend(format!(
            "all {} items failed; first error: {}",
            report.item_count,
            first.unwrap_or_default()
        )));
    }
    Ok(())
}

pub fn run(command: Command, config_path: Option<&Path>) -> Result<(), CliError> {
    let file = file_config(config_path)?;
    match command {
        Command::Describe { image, id, run } => {
            describe(&RunConfig::resolve(&run, &file, "describe")?, &image, id)
        }
        Command::Eval {
            run,
            dry_run,
            limit,
            format,
        } => {
            let format: ReportFormat = format.parse().map_err(CliError::Usage)?;
            eval(
                &RunConfig::resolve(&run, &file, "eval")?,
                dry_run,
                limit,
                format,
            )
        }
        Command::Sweep {
            run,
            levels,
            dry_run,
            limit,
        } => {
            let levels = if levels.is_empty() {
                ResolutionLevel::ALL.to_vec()
            } else {
                levels
                    .iter()
                    .map(|l| l.parse().map_err(CliError::Usage))
                    .collect::<Result<_, _>>()?
            };
            sweep(
                &RunConfig::resolve(&run, &file, "sweep")?,
                &levels,
                dry_run,
                limit,
            )
        }
        Command::Optimize {
            run,
            budget,
            dev_size,
            rewrites,
            demo_pool,
            max_demos,
            metric,
            dry_run,
        } => {
            let config = RunConfig::resolve(&run, &file, "optimize")?;
            let metric: OptMetric = metric.parse().map_err(CliError::Usage)?;
            let opt = OptimizerConfig {
                budget: OptBudget::new(budget, config.seed),
                rewrites,
                demo_pool,
                max_demos,
                metric,
                workers: config.workers,
            };
            optimize_cmd(&config, &opt, dev_size, dry_run)
        }
        Command::Label {
            run,
            limit,
            force,
            dry_run,
        } => label(
            &RunConfig::resolve(&run, &file, "label")?,
            limit,
            force,
            dry_run,
        ),
        Command::Stats { run } => stats_cmd(&RunConfig::resolve(&run, &file, "stats")?),
        Command::ExportFt { run, mode, reviews } => {
            let mode: ExportMode = mode.parse().map_err(CliError::Usage)?;
            export_cmd(
                &RunConfig::resolve(&run, &file, "export")?,
                mode,
                reviews.as_deref(),
            )
        }
        Command::Serve {
            dataset,
            bind,
            port,
            log,
            lease_seconds,
            ui_dir,
        } => {
            let s = &file.serve;
            let dataset = dataset.or(file.dataset.clone()).ok_or_else(|| {
                CliError::Usage("serve needs --dataset or `dataset` in the config file".into())
            })?;
            let mut service = ServiceConfig::new(dataset);
            service.bind = bind.or(s.bind.clone()).unwrap_or(service.bind);
            service.port = port.or(s.port).unwrap_or(service.port);
            service.log = log.or(s.log.clone());
            service.lease_seconds = lease_seconds
                .or(s.lease_seconds)
                .unwrap_or(service.lease_seconds);
            service.ui_dir = ui_dir.or(s.ui_dir.clone());
            Ok(scenelayers_curation::serve_blocking(service)?)
        }
        Command::Report { run_dir, format } => {
            let format: ReportFormat = format.parse().map_err(CliError::Usage)?;
            let report = load_report(&run_dir).map_err(|e| CliError::Data(e.to_string()))?;
            emit_report(&report, &run_dir, format)?;
            print_table(&[&report]);
            Ok(())
        }
    }
}

fn describe(config: &RunConfig, image_path: &Path, id: Option<String>) -> Result<(), CliError> {
    let dataset = match &config.dataset {
        Some(p) => Some(load_manifest_with(
            p,
            LoadOptions {
                check_images: false,
            },
        )?),
        None => None,
    };
    let config = RunConfig {
        cache: false,
        ..config.clone()
    };
    let gw = build_gateway(&config, dataset.as_ref())?;
    let id = id.unwrap_or_else(|| {
        image_path
            .file_stem()
            .map_or("image".into(), |s| s.to_string_lossy().into_owned())
    });
    let image =
        ImageInput::from_path(&id, image_path).map_err(|e| CliError::Data(e.to_string()))?;
    let image = resize(&image, config.resolution).map_err(|e| CliError::Data(e.to_string()))?;
    let method = if config.method.layered() {
        config.method
    } else {
        MethodId::Full
    };
    let program = method_config(&RunConfig {
        method,
        ..config.clone()
    })?
    .program;
    let layers = extract_layers(&gw, &image, &program, &config.model, Some(&id))?;
    let scene = aggregate(layers.into_iter().map(|(d, _)| d))
        .map_err(|e| CliError::Backend(e.to_string()))?;
    println!("{}", scene.aggregate_text());
    Ok(())
}

fn eval(
    config: &RunConfig,
    dry_run: bool,
    limit: Option<usize>,
    format: ReportFormat,
) -> Result<(), CliError> {
    let ds = load_dataset(config, true, limit)?;
    let method = method_config(config)?;
    if dry_run {
        let gw = build_gateway(
            &RunConfig {
                cache: false,
                ..config.clone()
            },
            Some(&ds),
        )?;
        println!("{}", plan(&method, gw.spec(&config.model)?, ds.len()));
        return Ok(());
    }
    let mut out = Outputs::create(&config.output)?;
    let gw = build_gateway(config, Some(&ds))?;
    let report = run_batch(&gw, &ds, &method, &config.model, config.workers)?;
    for p in emit_report(&report, &config.output, format)?.paths {
        out.record(&p);
    }
    out.write_json("config.json", config)?;
    out.finish("eval")?;
    print_table(&[&report]);
    fail_if_all_errored(&report)
}

fn sweep(
    config: &RunConfig,
    levels: &[ResolutionLevel],
    dry_run: bool,
    limit: Option<usize>,
) -> Result<(), CliError> {
    let ds = load_dataset(config, true, limit)?;
    let method = method_config(config)?;
    if dry_run {
        let gw = build_gateway(
            &RunConfig {
                cache: false,
                ..config.clone()
            },
            Some(&ds),
        )?;
        for level in levels {
            println!(
                "{}\n",
                plan(
                    &method.clone().with_resolution(*level),
                    gw.spec(&config.model)?,
                    ds.len()
                )
            );
        }
        return Ok(());
    }
    let mut out = Outputs::create(&config.output)?;
    let gw = build_gateway(config, Some(&ds))?;
    let reports = resolution_sweep(&gw, &ds, &method, &config.model, config.workers, levels)?;
    let reference = reports
        .iter()
        .find(|r| r.resolution == ResolutionLevel::P360)
        .map(|r| r.efficiency.mean_image_tokens)
        .filter(|t| *t > 0.0);

    let path = config.output.join("sweep.csv");
    let mut text = summary_columns().join(",") + ",image_token_ratio_vs_360p\n";
    for r in &reports {
        let dir = config.output.join(format!("p{}", r.resolution.height()));
        for p in emit_report(r, &dir, ReportFormat::All)?.paths {
            out.record(&p);
        }
        let ratio = reference.map_or(String::new(), |base| {
            format!("{:.4}", r.efficiency.mean_image_tokens / base)
        });
        text += &(summary_row(r).join(",") + "," + &ratio + "\n");
    }
    std::fs::write(&path, text).map_err(out_err(&path))?;
    out.record(&path);
    out.write_json("config.json", config)?;
    out.finish("sweep")?;
    print_table(&reports.iter().collect::<Vec<_>>());
    reports.iter().try_for_each(fail_if_all_errored)
}

/// The method an optimized program is saved for.
fn optimized_counterpart(method: MethodId) -> MethodId {
    match method {
        MethodId::Full => MethodId::FullOpt,
        MethodId::Text => MethodId::TextOpt,
        m => m,
    }
}

fn optimize_cmd(
    config: &RunConfig,
    opt: &OptimizerConfig,
    dev_size: Option<usize>,
    dry_run: bool,
) -> Result<(), CliError> {
    let ds = load_dataset(config, true, None)?;
    let dev_size = dev_size.unwrap_or(ds.len() / 2);
    let split = balanced_subset(
        &ds,
        &SplitSpec {
            relax: true,
            ..SplitSpec::balanced(dev_size, config.seed)
        },
    )?;
    let (train, dev) = (split.complement, split.subset);
    let method = method_config(config)?;
    if dry_run {
        let gw = build_gateway(
            &RunConfig {
                cache: false,
                ..config.clone()
            },
            Some(&ds),
        )?;
        let spec = gw.spec(&config.model)?;
        let per_candidate: QueryPlan = plan(&method, spec, dev.len());
        println!(
            "train items       {}\ndev items         {}",
            train.len(),
            dev.len()
        );
        println!(
            "candidates (max)  {}",
            opt.budget.max_evaluations.min(opt.budget.max_candidates)
        );
        println!("per candidate:\n{per_candidate}");
        return Ok(());
    }
    let mut out = Outputs::create(&config.output)?;
    let gw = build_gateway(config, Some(&ds))?;
    let trace = config.output.join("opt_trace.jsonl");
    let result = optimize(&gw, &train, &dev, &method, &config.model, opt, Some(&trace))?;
    out.record(&trace);

    let target = optimized_counterpart(config.method);
    let prompts = config.output.join("prompts");
    result.program.save_dir(&prompts, target.as_str())?;
    for t in &result.program.templates {
        out.record(&prompts.join(format!("{}.txt", t.name)));
    }
    out.record(&prompts.join("program.json"));
    let summary = json!({
        "method": config.method,
        "saved_for": target,
        "metric": format!("{:?}", opt.metric),
        "train_items": train.len(),
        "dev_items": dev.len(),
        "baseline_score": result.baseline_score,
        "best_score": result.best_score,
        "candidates_scored": result.trials.len(),
        "partial": result.partial,
        "instructions": result.instructions,
        "demo_pool": result.demo_pool.len(),
    });
    out.write_json("optimize.json", &summary)?;
    out.write_json("config.json", config)?;
    out.finish("optimize")?;
    println!(
        "dev score {:.4} -> {:.4} over {} candidate(s); prompts written to {}",
        result.baseline_score,
        result.best_score,
        result.trials.len(),
        prompts.display()
    );
    Ok(())
}

fn label(
    config: &RunConfig,
    limit: Option<usize>,
    force: bool,
    dry_run: bool,
) -> Result<(), CliError> {
    let ds = load_dataset(config, true, None)?;
    let method = method_config(config)?;
    let checkpoint = config.output.join("annotations.jsonl");
    let opts = AutolabelOptions {
        force,
        dry_run,
        limit,
        workers: config.workers,
        checkpoint: Some(checkpoint.clone()),
    };
    if dry_run {
        let gw = build_gateway(
            &RunConfig {
                cache: false,
                ..config.clone()
            },
            Some(&ds),
        )?;
        let outcome = autolabel(&gw, &ds, &method, &config.model, &opts)?;
        println!("already annotated {}", outcome.plan.skipped);
        println!(
            "{}",
            plan(&method, gw.spec(&config.model)?, outcome.plan.pending.len())
        );
        return Ok(());
    }
    let mut out = Outputs::create(&config.output)?;
    let gw = build_gateway(config, Some(&ds))?;
    let outcome = autolabel(&gw, &ds, &method, &config.model, &opts)?;
    out.record(&checkpoint);
    let manifest = config.output.join("labeled.jsonl");
    save_manifest(&outcome.dataset, &manifest)?;
    out.record(&manifest);
    out.write_json("config.json", config)?;
    out.finish("label")?;
    println!(
        "annotated {} item(s) ({} resumed from checkpoint, {} skipped, {} error(s)); manifest {}",
        outcome.processed,
        outcome.resumed,
        outcome.plan.skipped,
        outcome.errors,
        manifest.display()
    );
    Ok(())
}

fn render_stats(s: &DatasetStats) -> String {
    let mut t = String::new();
    t += &format!("records      {}\nlabeled      {}\n", s.total, s.labeled);
    t += &format!(
        "anomalous    {} ({:.1}%)\n\n",
        s.anomalous, s.anomalous_share_pct
    );
    t += "layer                     count  share of anomalous\n";
    for layer in SceneLayer::ALL {
        let n = s.layer_counts.get(&layer).copied().unwrap_or(0);
        let pct = s.layer_share_pct.get(&layer).copied().unwrap_or(0.0);
        t += &format!("{:<24}  {n:>5}  {pct:.1}%\n", layer.display_name());
    }
    t += "\nlayers flagged  count  share\n";
    for k in 0..4 {
        t += &format!(
            "{:<15}  {:>5}  {:.1}%\n",
            k + 1,
            s.layer_count_histogram[k],
            s.layer_count_share_pct[k]
        );
    }
    if s.unattributed > 0 {
        t += &format!("unattributed     {:>5}\n", s.unattributed);
    }
    t += "\ncombination  count\n";
    for (key, n) in &s.combination_counts {
        t += &format!("{key:<11}  {n:>5}\n");
    }
    t
}

fn stats_cmd(config: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(config, false, None)?;
    let s = stats(&ds);
    let mut out = Outputs::create(&config.output)?;
    out.write_json("stats.json", &s)?;
    out.finish("stats")?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(render_stats(&s).as_bytes())
        .map_err(|e| CliError::Output(e.to_string()))?;
    Ok(())
}

fn export_cmd(
    config: &RunConfig,
    mode: ExportMode,
    reviews: Option<&Path>,
) -> Result<(), CliError> {
    let mut ds = load_manifest(config.dataset()?)?;
    if let Some(log) = reviews {
        ds = replay(ds, &read_review_log(log)?);
    }
    let program = match &config.prompts {
        Some(dir) => Some(PromptProgram::load_dir(dir)?.0),
        None => None,
    };
    let opts = ExportOptions {
        mode,
        resolution: config.resolution,
        program,
    };
    let mut out = Outputs::create(&config.output)?;
    let name = match mode {
        ExportMode::SingleShot => "finetune_single_shot.jsonl",
        ExportMode::Pipeline => "finetune_pipeline.jsonl",
    };
    let path = config.output.join(name);
    let summary = export_finetune(&ds, &path, &opts)?;
    out.record(&path);
    out.record(&scenelayers::datastore::sidecar_path(&path));
    out.finish("export-ft")?;
    println!(
        "{} conversation(s) from {} curated item(s); {} unreviewed excluded; {}",
        summary.conversations,
        summary.items,
        summary.excluded_unreviewed,
        path.display()
    );
    Ok(())
}
