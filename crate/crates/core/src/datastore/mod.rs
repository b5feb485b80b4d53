//! Dataset manifests, splits, statistics, auto-labeling, the review log and
//! fine-tune export.
//!
//! Every file is line-oriented: a JSON header line naming the format and
//! version, then one JSON record per line.
//!
//! Manifest record fields:
//!
//! | field        | type                          | notes                                  |
//! |--------------|-------------------------------|----------------------------------------|
//! | `id`         | string                        | unique                                 |
//! | `image`      | path                          | relative paths resolve against the manifest directory |
//! | `gold`       | `{is_anomalous, layer_flags, provenance}` | optional                   |
//! | `annotation` | `{model, method, verdict, scene, error}`  | optional model output      |
//! | `review`     | `unreviewed` \| `accepted` \| `corrected` | defaults to `unreviewed`   |

mod autolabel;
mod export;
mod split;
mod stats;
mod store;

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::{validate_gold, GoldLabel, Provenance};
use crate::pipeline::{ItemFailure, MethodId};
use crate::scene::SceneDescription;
use crate::verdict::AnomalyVerdict;

pub use autolabel::{autolabel, plan_autolabel, AutolabelOptions, AutolabelOutcome, AutolabelPlan};
pub use export::{export_finetune, sidecar_path, ExportMode, ExportOptions, ExportSummary};
pub use split::{balanced_subset, Split, SplitSpec};
pub use stats::{stats, DatasetStats};
pub use store::{
    read_review_log, replay, CorrectedVerdict, Decision, LabelStore, Progress, ReviewEntry,
    ReviewError, ReviewSubmission, ReviewerTally,
};

pub const MANIFEST_FORMAT: &str = "scenelayers/manifest";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing or invalid header line (expected format `{expected}`)")]
    Header {
        path: PathBuf,
        expected: &'static str,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: duplicate item id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: item `{id}` has an invalid gold label: {}", rules.join(", "))]
    InvalidGold {
        path: PathBuf,
        line: usize,
        id: String,
        rules: Vec<String>,
    },
    #[error("{path}:{line}: item `{id}`: {reason}")]
    Invariant {
        path: PathBuf,
        line: usize,
        id: String,
        reason: String,
    },
    #[error("{path}:{line}: item `{id}`: image not found at {image}")]
    MissingImage {
        path: PathBuf,
        line: usize,
        id: String,
        image: PathBuf,
    },
    #[error("item `{0}` has no gold label")]
    MissingGold(String),
    #[error("not enough {class} records: need {needed}, have {available} (deficit {})", needed - available)]
    InsufficientRecords {
        class: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("pipeline export needs stored scene descriptions; missing for: {}", .0.join(", "))]
    MissingDescriptions(Vec<String>),
    #[error("{0}")]
    Other(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatastoreError + '_ {
    move |source| DatastoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    #[default]
    Unreviewed,
    Accepted,
    Corrected,
}

/// Output of a model labeling pass over one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnnotation {
    pub model: String,
    pub method: MethodId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<AnomalyVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneDescription>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ItemFailure>,
}

impl ModelAnnotation {
    pub fn is_complete(&self) -> bool {
        self.error.is_none()
            && self
                .verdict
                .as_ref()
                .is_some_and(|v| v.classification().is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<GoldLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<ModelAnnotation>,
    #[serde(default)]
    pub review: ReviewState,
}

impl DatasetRecord {
    pub fn new(id: impl Into<String>, image: impl Into<PathBuf>) -> Self {
        DatasetRecord {
            id: id.into(),
            image: image.into(),
            gold: None,
            annotation: None,
            review: ReviewState::Unreviewed,
        }
    }

    pub fn with_gold(mut self, gold: GoldLabel) -> Self {
        self.gold = Some(gold);
        self
    }

    fn invariant_violation(&self) -> Option<String> {
        if self.review == ReviewState::Corrected
            && self.gold.as_ref().map(|g| g.provenance) != Some(Provenance::ModelThenHumanCorrected)
        {
            return Some(
                "review state `corrected` requires gold provenance `model_then_human_corrected`"
                    .into(),
            );
        }
        None
    }
}

/// Records plus the directory relative image paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>, records: Vec<DatasetRecord>) -> Self {
        Dataset {
            root: root.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &DatasetRecord) -> PathBuf {
        if record.image.is_absolute() {
            record.image.clone()
        } else {
            self.root.join(&record.image)
        }
    }

    pub fn get(&self, id: &str) -> Option<&DatasetRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut DatasetRecord> {
        self.records.iter_mut().find(|r| r.id == id)
    }

    /// Same root, selected records.
    pub fn with_records(&self, records: Vec<DatasetRecord>) -> Dataset {
        Dataset {
            root: self.root.clone(),
            records,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct Header {
    pub format: String,
    pub version: u32,
}

pub(crate) fn header_line(format: &str) -> String {
    serde_json::to_string(&Header {
        format: format.to_string(),
        version: FORMAT_VERSION,
    })
    .expect("header")
}

/// Reads a headered line file: returns `(line number, text)` for each record line.
pub(crate) fn read_records(
    path: &Path,
    format: &'static str,
) -> Result<Vec<(usize, String)>, DatastoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let header_ok = lines
        .next()
        .and_then(|(_, l)| serde_json::from_str::<Header>(l).ok())
        .is_some_and(|h| h.format == format && h.version == FORMAT_VERSION);
    if !header_ok {
        return Err(DatastoreError::Header {
            path: path.to_path_buf(),
            expected: format,
        });
    }
    Ok(lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Require every image path to exist.
    pub check_images: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { check_images: true }
    }
}

pub fn load_manifest(path: &Path) -> Result<Dataset, DatastoreError> {
    load_manifest_with(path, LoadOptions::default())
}

pub fn load_manifest_with(path: &Path, opts: LoadOptions) -> Result<Dataset, DatastoreError> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (line, text) in read_records(path, MANIFEST_FORMAT)? {
        let record: DatasetRecord =
            serde_json::from_str(&text).map_err(|e| DatastoreError::Malformed {
                path: path.to_path_buf(),
                line,
                reason: e.to_string(),
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(DatastoreError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: record.id,
            });
        }
        if let Some(gold) = &record.gold {
            let v = validate_gold(gold);
            if !v.is_ok() {
                return Err(DatastoreError::InvalidGold {
                    path: path.to_path_buf(),
                    line,
                    id: record.id,
                    rules: v.violation_messages(),
                });
            }
        }
        if let Some(reason) = record.invariant_violation() {
            return Err(DatastoreError::Invariant {
                path: path.to_path_buf(),
                line,
                id: record.id,
                reason,
            });
        }
        if opts.check_images {
            let image = if record.image.is_absolute() {
                record.image.clone()
            } else {
                root.join(&record.image)
            };
            if !image.is_file() {
                return Err(DatastoreError::MissingImage {
                    path: path.to_path_buf(),
                    line,
                    id: record.id,
                    image,
                });
            }
        }
        records.push(record);
    }
    Ok(Dataset { root, records })
}

pub fn save_manifest(dataset: &Dataset, path: &Path) -> Result<(), DatastoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{}", header_line(MANIFEST_FORMAT))?;
        for r in &dataset.records {
            let line = if r.image.is_absolute() || same_dir(&dataset.root, path.parent()) {
                serde_json::to_string(r)
            } else {
                let image = std::path::absolute(dataset.image_path(r))?;
                serde_json::to_string(&DatasetRecord { image, ..r.clone() })
            };
            writeln!(w, "{}", line.expect("serializable record"))?;
        }
        w.flush()
    };
    write().map_err(io_err(path))
}

/// Relative image paths stay relative only when the manifest stays beside them.
fn same_dir(root: &Path, manifest_dir: Option<&Path>) -> bool {
    let norm = |p: &Path| {
        std::path::absolute(if p.as_os_str().is_empty() {
            Path::new(".")
        } else {
            p
        })
        .ok()
    };
    let dir = manifest_dir.unwrap_or(Path::new(""));
    root == dir || norm(root).is_some() && norm(root) == norm(dir)
}
