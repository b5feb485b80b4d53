//! Resumable model labeling.
//!
//! Each finished item is appended to a checkpoint file as soon as it
//! completes, so an interrupted run resumes where it stopped. On replay the
//! last entry for an id wins.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    header_line, io_err, read_records, Dataset, DatasetRecord, DatastoreError, ModelAnnotation,
};
use crate::exec::{par_map, with_workers};
use crate::gateway::Gateway;
use crate::imageprep::ImageInput;
use crate::label::{GoldLabel, Provenance};
use crate::pipeline::{run_method, ItemResult, MethodConfig, MethodId, PipelineError};

pub const CHECKPOINT_FORMAT: &str = "scenelayers/annotations";

#[derive(Debug, Clone, Default)]
pub struct AutolabelOptions {
    /// Re-annotate items that already carry a complete annotation.
    pub force: bool,
    /// Plan only; no gateway calls.
    pub dry_run: bool,
    /// Process at most this many pending items.
    pub limit: Option<usize>,
    pub workers: usize,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutolabelPlan {
    pub pending: Vec<String>,
    /// Items skipped because they are already annotated.
    pub skipped: usize,
    pub planned_queries: usize,
}

#[derive(Debug, Clone)]
pub struct AutolabelOutcome {
    pub dataset: Dataset,
    pub plan: AutolabelPlan,
    /// Annotations restored from the checkpoint before this run.
    pub resumed: usize,
    pub processed: usize,
    pub errors: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    id: String,
    annotation: ModelAnnotation,
}

pub fn plan_autolabel(
    dataset: &Dataset,
    method: MethodId,
    force: bool,
    limit: Option<usize>,
) -> AutolabelPlan {
    let mut pending = Vec::new();
    let mut skipped = 0;
    for r in &dataset.records {
        if !force
            && r.annotation
                .as_ref()
                .is_some_and(ModelAnnotation::is_complete)
        {
            skipped += 1;
        } else {
            pending.push(r.id.clone());
        }
    }
    if let Some(n) = limit {
        pending.truncate(n);
    }
    let planned_queries = pending.len() * method.planned_queries();
    AutolabelPlan {
        pending,
        skipped,
        planned_queries,
    }
}

fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>, DatastoreError> {
    let lines = read_records(path, CHECKPOINT_FORMAT)?;
    let last = lines.len();
    let mut out = Vec::with_capacity(last);
    for (n, (line, text)) in lines.into_iter().enumerate() {
        match serde_json::from_str(&text) {
            Ok(entry) => out.push(entry),
            // A torn final line from an interrupted write is dropped.
            Err(_) if n + 1 == last => log::warn!(
                "{}:{line}: ignoring incomplete trailing entry",
                path.display()
            ),
            Err(e) => {
                return Err(DatastoreError::Malformed {
                    path: path.to_path_buf(),
                    line,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn open_checkpoint(path: &Path) -> Result<BufWriter<fs::File>, DatastoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{}", header_line(CHECKPOINT_FORMAT)).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    Ok(w)
}

fn annotate(
    gateway: &Gateway,
    dataset: &Dataset,
    record: &DatasetRecord,
    config: &MethodConfig,
    model: &str,
) -> ModelAnnotation {
    let result = match ImageInput::from_path(&record.id, dataset.image_path(record)) {
        Ok(image) => run_method(gateway, config, &image, model, &record.id),
        Err(e) => ItemResult::failed(&record.id, &PipelineError::Image(e)),
    };
    ModelAnnotation {
        model: model.to_string(),
        method: config.method,
        verdict: result.verdict,
        scene: result.scene,
        error: result.error,
    }
}

fn apply(record: &mut DatasetRecord, annotation: ModelAnnotation) {
    if record.gold.is_none() {
        if let Some(v) = annotation
            .verdict
            .as_ref()
            .filter(|_| annotation.error.is_none())
        {
            if let Some(is_anomalous) = v.classification() {
                record.gold = Some(GoldLabel::new(
                    is_anomalous,
                    v.layer_flags,
                    Provenance::Model,
                ));
            }
        }
    }
    record.annotation = Some(annotation);
}

/// Annotates every pending record with `config.method`. Per-item failures
/// are stored on the record; only I/O problems abort the run.
pub fn autolabel(
    gateway: &Gateway,
    dataset: &Dataset,
    config: &MethodConfig,
    model: &str,
    opts: &AutolabelOptions,
) -> Result<AutolabelOutcome, DatastoreError> {
    let mut dataset = dataset.clone();
    let mut resumed = 0;
    if let Some(cp) = opts.checkpoint.as_deref().filter(|p| p.exists()) {
        for entry in read_checkpoint(cp)? {
            if let Some(r) = dataset.get_mut(&entry.id) {
                apply(r, entry.annotation);
                resumed += 1;
            }
        }
    }
    let plan = plan_autolabel(&dataset, config.method, opts.force, opts.limit);
    if opts.dry_run {
        return Ok(AutolabelOutcome {
            dataset,
            plan,
            resumed,
            processed: 0,
            errors: 0,
        });
    }

    let writer = match &opts.checkpoint {
        Some(p) => Some(Mutex::new(open_checkpoint(p)?)),
        None => None,
    };
    let pending: Vec<&DatasetRecord> = plan
        .pending
        .iter()
        .filter_map(|id| dataset.get(id))
        .collect();
    let results: Vec<Result<(String, ModelAnnotation), DatastoreError>> =
        with_workers(opts.workers, || {
            par_map(&pending, |record| {
                let annotation = annotate(gateway, &dataset, record, config, model);
                if let (Some(w), Some(path)) = (&writer, &opts.checkpoint) {
                    let line = serde_json::to_string(&CheckpointEntry {
                        id: record.id.clone(),
                        annotation: annotation.clone(),
                    })
                    .expect("serializable annotation");
                    let mut w = w.lock().expect("checkpoint lock");
                    writeln!(w, "{line}")
                        .and_then(|_| w.flush())
                        .map_err(io_err(path))?;
                }
                Ok((record.id.clone(), annotation))
            })
        });

    let mut processed = 0;
    let mut errors = 0;
    for r in results {
        let (id, annotation) = r?;
        processed += 1;
        if annotation.error.is_some() {
            errors += 1;
        }
        if let Some(rec) = dataset.get_mut(&id) {
            apply(rec, annotation);
        }
    }
    Ok(AutolabelOutcome {
        dataset,
        plan,
        resumed,
        processed,
        errors,
    })
}
