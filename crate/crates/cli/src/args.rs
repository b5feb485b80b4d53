use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "scenelayers",
    version,
    about = "Layered scene anomaly detection: runs, sweeps, labeling and curation"
)]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every command that talks to a model.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Registered model name.
    #[arg(long)]
    pub model: Option<String>,
    /// One of: image_baseline, text_baseline, baseline, image, text, text_opt, full, full_opt.
    #[arg(long)]
    pub method: Option<String>,
    /// Dataset manifest.
    #[arg(long, value_name = "MANIFEST")]
    pub dataset: Option<PathBuf>,
    /// Image height sent to the model: 180, 240, 360, 540 or 720.
    #[arg(long)]
    pub resolution: Option<String>,
    /// Items processed concurrently.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the response cache.
    #[arg(long)]
    pub no_cache: bool,
    /// Run output directory.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Prompt-asset directory (as written by `optimize`).
    #[arg(long, value_name = "DIR")]
    pub prompts: Option<PathBuf>,
    /// Model registry TOML with `[[model]]` entries.
    #[arg(long, value_name = "FILE")]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Phase 1 only: print the four layer descriptions of one image.
    Describe {
        image: PathBuf,
        /// Item id used for tracing; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a method over a labeled dataset and write report files.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Print the query plan and estimated cost without calling the model.
        #[arg(long)]
        dry_run: bool,
        /// Only the first N records.
        #[arg(long)]
        limit: Option<usize>,
        /// table (CSV), records (JSON/JSONL) or all.
        #[arg(long, default_value = "all")]
        format: String,
    },
    /// Evaluate at several image resolutions.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated heights; defaults to all five levels.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<String>,
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Search instructions and demonstrations on a dev split and write prompt assets.
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        /// Maximum number of candidate programs scored on the dev split.
        #[arg(long, default_value_t = 8)]
        budget: usize,
        /// Dev split size (balanced); the rest is used for demonstrations.
        #[arg(long)]
        dev_size: Option<usize>,
        /// Instruction rewrites requested from the model.
        #[arg(long, default_value_t = 3)]
        rewrites: usize,
        /// Demonstrations harvested from the training split.
        #[arg(long, default_value_t = 4)]
        demo_pool: usize,
        /// Demonstrations attached to one candidate at most.
        #[arg(long, default_value_t = 2)]
        max_demos: usize,
        /// f1, recall_weighted or accuracy.
        #[arg(long, default_value = "f1")]
        metric: String,
        #[arg(long)]
        dry_run: bool,
    },
    /// Annotate a dataset with model labels; resumes from the checkpoint.
    Label {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        limit: Option<usize>,
        /// Re-annotate records that already have a complete annotation.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dry_run: bool,
    },
    /// Class and layer distribution of a dataset.
    Stats {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Export curated records as chat fine-tuning conversations.
    ExportFt {
        #[command(flatten)]
        run: RunArgs,
        /// single_shot or pipeline.
        #[arg(long)]
        mode: String,
        /// Review log replayed onto the manifest before export.
        #[arg(long, value_name = "LOG")]
        reviews: Option<PathBuf>,
    },
    /// Run the review service.
    Serve {
        #[arg(long, value_name = "MANIFEST")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Review log; defaults to `<manifest stem>.reviews.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        lease_seconds: Option<u64>,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Re-render the summaries of an existing run directory.
    Report {
        run_dir: PathBuf,
        #[arg(long, default_value = "all")]
        format: String,
    },
}
