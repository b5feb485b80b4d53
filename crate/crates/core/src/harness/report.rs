//! Report files for one run.
//!
//! | file                | content                                            |
//! |---------------------|----------------------------------------------------|
//! | `summary.json`      | metrics, efficiency, failure rates (headered)      |
//! | `summary.csv`       | one-row table of the headline numbers              |
//! | `items.jsonl`       | header line, then one item record per line         |
//! | `items.csv`         | one row per item; header only when there are none  |
//! | `failure_rates.csv` | one row per gold layer combination                 |
//!
//! Columns and keys come out in a fixed order. Wall-clock fields all end in
//! `latency_s`; everything else is reproducible for a fixed seed and cache.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, ItemRecord, RunReport};

pub const ITEMS_FORMAT: &str = "scenelayers/run-items";
pub const SUMMARY_FORMAT: &str = "scenelayers/run-summary";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    /// CSV tables only.
    Table,
    /// JSON and JSONL only.
    Records,
    #[default]
    All,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table" | "csv" => Ok(ReportFormat::Table),
            "records" | "json" | "jsonl" => Ok(ReportFormat::Records),
            "all" => Ok(ReportFormat::All),
            other => Err(format!(
                "unknown report format `{other}` (expected table, records or all)"
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmittedFiles {
    pub paths: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    report: RunReport,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn opt_bool(b: Option<bool>) -> String {
    b.map(|b| b.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

const ITEM_COLUMNS: [&str; 14] = [
    "item_id",
    "gold",
    "gold_layers",
    "predicted",
    "predicted_layers",
    "correct",
    "error",
    "queries",
    "input_tokens",
    "output_tokens",
    "image_tokens",
    "cost",
    "cache_hits",
    "latency_s",
];

fn item_row(i: &ItemRecord) -> Vec<String> {
    let r = &i.result;
    let sum = |f: fn(&crate::pipeline::QueryRecord) -> u64| {
        r.queries.iter().map(f).sum::<u64>().to_string()
    };
    vec![
        r.item_id.clone(),
        i.gold.is_anomalous.to_string(),
        crate::layer::combination_key(i.gold.layer_flags),
        opt_bool(r.predicted()),
        r.verdict
            .as_ref()
            .map(|v| crate::layer::combination_key(v.layer_flags))
            .unwrap_or_default(),
        opt_bool(i.correct()),
        r.error
            .as_ref()
            .map(|e| e.message.clone())
            .unwrap_or_default(),
        r.queries.len().to_string(),
        sum(|q| q.input_tokens),
        sum(|q| q.output_tokens),
        sum(|q| q.image_tokens),
        f6(r.total_cost),
        r.queries.iter().filter(|q| q.cache_hit).count().to_string(),
        f4(r.total_latency_s),
    ]
}

const SUMMARY_COLUMNS: [&str; 18] = [
    "method",
    "model",
    "resolution",
    "items",
    "errors",
    "tp",
    "fp",
    "tn",
    "fn",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "queries",
    "mean_tokens_per_query",
    "mean_image_tokens",
    "total_cost",
    "mean_latency_s",
];

/// Header row for [`summary_row`].
pub fn summary_columns() -> &'static [&'static str] {
    &SUMMARY_COLUMNS
}

/// The headline numbers of a report as one CSV row.
pub fn summary_row(r: &RunReport) -> Vec<String> {
    let m = &r.metrics;
    let e = &r.efficiency;
    vec![
        r.method.to_string(),
        r.model.clone(),
        r.resolution.to_string(),
        r.item_count.to_string(),
        r.error_count.to_string(),
        m.tp.to_string(),
        m.fp.to_string(),
        m.tn.to_string(),
        m.fn_.to_string(),
        f4(m.accuracy),
        f4(m.precision),
        f4(m.recall),
        f4(m.f1),
        e.queries.to_string(),
        f4(e.mean_tokens_per_query),
        f4(e.mean_image_tokens),
        f6(e.total_cost),
        f4(e.mean_latency_s_per_query),
    ]
}

pub fn emit_report(
    report: &RunReport,
    dir: &Path,
    format: ReportFormat,
) -> Result<EmittedFiles, HarnessError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut out = EmittedFiles::default();
    if format != ReportFormat::Table {
        let path = dir.join("summary.json");
        let summary = SummaryFile {
            format: SUMMARY_FORMAT.into(),
            version: VERSION,
            report: report.clone(),
        };
        fs::write(
            &path,
            serde_json::to_string_pretty(&summary).expect("summary") + "\n",
        )
        .map_err(io(&path))?;
        out.paths.push(path);

        let path = dir.join("items.jsonl");
        let file = fs::File::create(&path).map_err(io(&path))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            format: ITEMS_FORMAT.into(),
            version: VERSION,
        };
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "{}", serde_json::to_string(&header).expect("header"))?;
            for item in &report.items {
                writeln!(w, "{}", serde_json::to_string(item).expect("item"))?;
            }
            w.flush()
        };
        write().map_err(io(&path))?;
        out.paths.push(path);
    }
    if format != ReportFormat::Records {
        let path = dir.join("summary.csv");
        write_csv(&path, &SUMMARY_COLUMNS, vec![summary_row(report)])?;
        out.paths.push(path);

        let path = dir.join("items.csv");
        write_csv(
            &path,
            &ITEM_COLUMNS,
            report.items.iter().map(item_row).collect(),
        )?;
        out.paths.push(path);

        let path = dir.join("failure_rates.csv");
        let rows = report
            .failure_rates
            .iter()
            .map(|(k, f)| {
                vec![
                    k.clone(),
                    f.items.to_string(),
                    f.failures.to_string(),
                    format!("{:.2}", f.rate_pct),
                ]
            })
            .collect();
        write_csv(
            &path,
            &["combination", "items", "failures", "rate_pct"],
            rows,
        )?;
        out.paths.push(path);
    }
    Ok(out)
}

/// Reads a report written with the `records` files.
pub fn load_report(dir: &Path) -> Result<RunReport, HarnessError> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let summary: SummaryFile = serde_json::from_str(&text).map_err(|e| HarnessError::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if summary.format != SUMMARY_FORMAT || summary.version != VERSION {
        return Err(HarnessError::Format {
            path,
            reason: "unsupported summary format or version".into(),
        });
    }
    let mut report = summary.report;

    let path = dir.join("items.jsonl");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let mut lines = text.lines().enumerate();
    let header_ok = lines
        .next()
        .and_then(|(_, l)| serde_json::from_str::<Header>(l).ok())
        .is_some_and(|h| h.format == ITEMS_FORMAT && h.version == VERSION);
    if !header_ok {
        return Err(HarnessError::Format {
            path,
            reason: format!("missing `{ITEMS_FORMAT}` header"),
        });
    }
    report.items = lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Format {
                path: path.clone(),
                reason: format!("line {}: {e}", n + 1),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(report)
}
