//! Human review: submissions, the append-only review log and its replay.
//!
//! The manifest is never rewritten by reviews. Each accepted submission is
//! appended to the log as one line and flushed before it is applied in
//! memory, so replaying the log over the manifest reproduces the state.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    header_line, io_err, load_manifest_with, read_records, Dataset, DatasetRecord, DatastoreError,
    LoadOptions, ReviewState,
};
use crate::label::{validate_label, GoldLabel, Provenance};
use crate::layer::{LayerSet, SceneLayer};

pub const REVIEW_LOG_FORMAT: &str = "scenelayers/review-log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Correct,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectedVerdict {
    pub is_anomalous: bool,
    #[serde(default)]
    pub layer_flags: LayerSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSubmission {
    pub reviewer: String,
    pub decision: Decision,
    /// Required for `correct`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected: Option<CorrectedVerdict>,
    /// Edited layer descriptions, keyed by layer.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub descriptions: BTreeMap<SceneLayer, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub seq: u64,
    pub timestamp: String,
    pub item_id: String,
    pub reviewer: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous: Option<GoldLabel>,
    pub gold: GoldLabel,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub descriptions: BTreeMap<SceneLayer, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown item `{0}`")]
    NotFound(String),
    #[error("invalid review: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Store(#[from] DatastoreError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewerTally {
    pub accepted: usize,
    pub corrected: usize,
}

/// Record counts by review state plus per-reviewer decision counts
/// (a re-reviewed item counts once per decision).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub reviewed: usize,
    pub accepted: usize,
    pub corrected: usize,
    pub unreviewed: usize,
    pub per_reviewer: BTreeMap<String, ReviewerTally>,
}

/// Validates a submission against the current record and builds the log entry.
fn build_entry(
    record: &DatasetRecord,
    sub: &ReviewSubmission,
    seq: u64,
) -> Result<ReviewEntry, ReviewError> {
    let mut problems = Vec::new();
    if sub.reviewer.trim().is_empty() {
        problems.push("reviewer is required".to_string());
    }
    let scene = record.annotation.as_ref().and_then(|a| a.scene.as_ref());
    if !sub.descriptions.is_empty() && scene.is_none() {
        problems.push("item has no layer descriptions to edit".to_string());
    }
    let gold = match sub.decision {
        Decision::Accept => {
            if sub.corrected.is_some() {
                problems.push("accept must not carry a corrected verdict".to_string());
            }
            let model = record
                .annotation
                .as_ref()
                .and_then(|a| a.verdict.as_ref())
                .and_then(|v| v.classification().map(|c| (c, v.layer_flags)));
            match model {
                Some((is_anomalous, flags)) => {
                    let provenance = if sub.descriptions.is_empty() {
                        Provenance::ModelAccepted
                    } else {
                        Provenance::ModelThenHumanCorrected
                    };
                    Some(GoldLabel::new(is_anomalous, flags, provenance))
                }
                None => {
                    problems.push("item has no model verdict to accept".to_string());
                    None
                }
            }
        }
        Decision::Correct => match &sub.corrected {
            Some(c) => {
                let v = validate_label(c.is_anomalous, c.layer_flags);
                problems.extend(v.violation_messages());
                Some(GoldLabel::new(
                    c.is_anomalous,
                    c.layer_flags,
                    Provenance::ModelThenHumanCorrected,
                ))
            }
            None => {
                problems.push("correct requires a corrected verdict".to_string());
                None
            }
        },
    };
    if !problems.is_empty() {
        return Err(ReviewError::Invalid(problems));
    }
    Ok(ReviewEntry {
        seq,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        item_id: record.id.clone(),
        reviewer: sub.reviewer.clone(),
        decision: sub.decision,
        previous: record.gold.clone(),
        gold: gold.expect("checked above"),
        descriptions: sub.descriptions.clone(),
        note: sub.note.clone(),
    })
}

fn apply_entry(dataset: &mut Dataset, entry: &ReviewEntry) -> bool {
    let Some(record) = dataset.get_mut(&entry.item_id) else {
        return false;
    };
    record.gold = Some(entry.gold.clone());
    record.review = if entry.gold.provenance == Provenance::ModelThenHumanCorrected {
        ReviewState::Corrected
    } else {
        ReviewState::Accepted
    };
    if let Some(scene) = record.annotation.as_mut().and_then(|a| a.scene.as_mut()) {
        for (layer, text) in &entry.descriptions {
            *scene = scene.with_layer_text(*layer, text.clone());
        }
    }
    true
}

pub fn read_review_log(path: &Path) -> Result<Vec<ReviewEntry>, DatastoreError> {
    read_records(path, REVIEW_LOG_FORMAT)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| DatastoreError::Malformed {
                path: path.to_path_buf(),
                line,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Applies log entries to a manifest in order. Entries for unknown ids are skipped.
pub fn replay(mut dataset: Dataset, log: &[ReviewEntry]) -> Dataset {
    for entry in log {
        if !apply_entry(&mut dataset, entry) {
            log::warn!(
                "review log entry {} names unknown item `{}`",
                entry.seq,
                entry.item_id
            );
        }
    }
    dataset
}

/// Manifest plus review log, kept in sync.
pub struct LabelStore {
    log_path: PathBuf,
    dataset: Dataset,
    log: Vec<ReviewEntry>,
}

impl LabelStore {
    /// Loads the manifest (images are not checked) and replays the log, creating it if absent.
    pub fn open(manifest: &Path, log_path: &Path) -> Result<Self, DatastoreError> {
        let dataset = load_manifest_with(
            manifest,
            LoadOptions {
                check_images: false,
            },
        )?;
        Self::from_dataset(dataset, log_path)
    }

    pub fn from_dataset(dataset: Dataset, log_path: &Path) -> Result<Self, DatastoreError> {
        let log = if log_path.exists() {
            read_review_log(log_path)?
        } else {
            if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            fs::write(log_path, header_line(REVIEW_LOG_FORMAT) + "\n").map_err(io_err(log_path))?;
            Vec::new()
        };
        let dataset = replay(dataset, &log);
        Ok(LabelStore {
            log_path: log_path.to_path_buf(),
            dataset,
            log,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn log(&self) -> &[ReviewEntry] {
        &self.log
    }

    pub fn review(
        &mut self,
        item_id: &str,
        submission: &ReviewSubmission,
    ) -> Result<ReviewEntry, ReviewError> {
        let record = self
            .dataset
            .get(item_id)
            .ok_or_else(|| ReviewError::NotFound(item_id.to_string()))?;
        let seq = self.log.last().map_or(1, |e| e.seq + 1);
        let entry = build_entry(record, submission, seq)?;
        let line = serde_json::to_string(&entry).expect("serializable entry") + "\n";
        let mut file = OpenOptions::new()
            .append(true)
            .open(&self.log_path)
            .map_err(io_err(&self.log_path))?;
        file.write_all(line.as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(io_err(&self.log_path))?;
        apply_entry(&mut self.dataset, &entry);
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress {
            total: self.dataset.len(),
            ..Default::default()
        };
        for r in &self.dataset.records {
            match r.review {
                ReviewState::Unreviewed => p.unreviewed += 1,
                ReviewState::Accepted => p.accepted += 1,
                ReviewState::Corrected => p.corrected += 1,
            }
        }
        p.reviewed = p.accepted + p.corrected;
        for e in &self.log {
            let t = p.per_reviewer.entry(e.reviewer.clone()).or_default();
            match e.decision {
                Decision::Accept => t.accepted += 1,
                Decision::Correct => t.corrected += 1,
            }
        }
        p
    }
}
