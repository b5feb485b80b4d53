//! Deterministic scriptable backend.
//!
//! Two reply sources, consulted in order:
//!
//! 1. Scripted records from a fixture file (one JSON record per line, `#`
//!    comments allowed). A record matches when every filter it sets matches:
//!    `fingerprint` (the request cache key), `contains` (substring of the user
//!    text), `item` and `purpose`. A record may fail its first `fail_times`
//!    matching calls with `failure` before replying.
//! 2. The oracle, which answers from sidecar gold labels: layer and scene
//!    descriptions are canned text, verdict queries get the gold label unless
//!    the item is selected for an error (explicit `flip`, otherwise a seeded
//!    hash compared with `error_rate`). When `cue` is set and the user text
//!    contains it, the oracle always answers correctly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendFailure, BackendReply, ChatRequest, GatewayError, ModelSpec, QueryPurpose,
    Usage,
};
use crate::layer::LayerSet;
use crate::verdict::render_answer_block;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    #[default]
    Transport,
    Timeout,
    Http500,
    Http429,
    Http400,
}

impl FailureKind {
    fn into_failure(self) -> BackendFailure {
        match self {
            FailureKind::Transport => {
                BackendFailure::Transport("scripted transport failure".into())
            }
            FailureKind::Timeout => BackendFailure::Timeout,
            FailureKind::Http500 => BackendFailure::Http {
                status: 500,
                body: "scripted server error".into(),
            },
            FailureKind::Http429 => BackendFailure::Http {
                status: 429,
                body: "scripted rate limit".into(),
            },
            FailureKind::Http400 => BackendFailure::Http {
                status: 400,
                body: "scripted bad request".into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<QueryPurpose>,
    #[serde(default)]
    pub reply: String,
    #[serde(default)]
    pub fail_times: u32,
    #[serde(default)]
    pub failure: FailureKind,
    /// Fail every matching call (never reply).
    #[serde(default)]
    pub always_fail: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl ScriptRecord {
    pub fn reply_to(contains: impl Into<String>, reply: impl Into<String>) -> Self {
        ScriptRecord {
            contains: Some(contains.into()),
            reply: reply.into(),
            ..Default::default()
        }
    }

    fn matches(&self, request: &ChatRequest, key: &str) -> bool {
        self.fingerprint.as_deref().is_none_or(|f| f == key)
            && self
                .contains
                .as_deref()
                .is_none_or(|c| request.user.contains(c))
            && self
                .item
                .as_deref()
                .is_none_or(|i| request.trace.item_id.as_deref() == Some(i))
            && self.purpose.is_none_or(|p| p == request.trace.purpose)
    }
}

/// Gold label the oracle answers from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLabel {
    pub id: String,
    pub is_anomalous: bool,
    #[serde(default)]
    pub layers: LayerSet,
    /// Forces a wrong (`true`) or right (`false`) answer for this item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OracleConfig {
    /// Sidecar label file (one `OracleLabel` per line).
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub error_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cue: Option<String>,
}

struct Oracle {
    labels: HashMap<String, OracleLabel>,
    error_rate: f64,
    seed: u64,
    cue: Option<String>,
}

impl Oracle {
    fn unit(&self, id: &str) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(id.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn answer(&self, request: &ChatRequest) -> Option<String> {
        let id = request.trace.item_id.as_deref()?;
        let label = self.labels.get(id)?;
        let text = match request.trace.purpose {
            QueryPurpose::LayerExtraction(layer) => {
                let state = if label.is_anomalous && label.layers.contains(layer) {
                    "an element of this layer is out of place for normal driving."
                } else {
                    "nothing unusual in this layer."
                };
                format!("{} layer of item {id}: {state}", layer.display_name())
            }
            QueryPurpose::SceneDescription => {
                let state = if label.is_anomalous {
                    "something in the scene is out of place."
                } else {
                    "an ordinary traffic scene."
                };
                format!("Scene of item {id}: {state}")
            }
            QueryPurpose::Evaluation | QueryPurpose::Direct => {
                let cued = self
                    .cue
                    .as_deref()
                    .is_some_and(|c| request.user.contains(c));
                let wrong = !cued
                    && label
                        .flip
                        .unwrap_or_else(|| self.unit(id) < self.error_rate);
                let predicted = label.is_anomalous != wrong;
                let flags = if predicted && label.is_anomalous {
                    label.layers
                } else {
                    LayerSet::EMPTY
                };
                render_answer_block(predicted, flags, &format!("oracle answer for item {id}"))
            }
            QueryPurpose::InstructionProposal | QueryPurpose::Other => return None,
        };
        Some(text)
    }
}

/// One call the mock received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedCall {
    pub item_id: Option<String>,
    pub purpose: QueryPurpose,
    pub system: Option<String>,
    pub user: String,
    pub image_digest: Option<String>,
    pub image_size: Option<(u32, u32)>,
    pub cache_key: String,
}

pub struct MockBackend {
    scripts: Vec<ScriptRecord>,
    failures_used: Mutex<Vec<u32>>,
    oracle: Option<Oracle>,
    delay: Duration,
    calls: Mutex<Vec<RecordedCall>>,
    active: AtomicUsize,
    peak: AtomicUsize,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, GatewayError> {
    let invalid = |reason: String| GatewayError::InvalidSpec {
        model: "mock".into(),
        reason,
    };
    let text = fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend {
            scripts: Vec::new(),
            failures_used: Mutex::new(Vec::new()),
            oracle: None,
            delay: Duration::ZERO,
            calls: Mutex::new(Vec::new()),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn from_config(
        fixture: Option<&Path>,
        oracle: Option<&OracleConfig>,
    ) -> Result<Self, GatewayError> {
        let mut mock = MockBackend::new();
        if let Some(path) = fixture {
            mock = mock.with_scripts(read_jsonl(path)?);
        }
        if let Some(cfg) = oracle {
            let labels = match &cfg.labels {
                Some(path) => read_jsonl(path)?,
                None => Vec::new(),
            };
            mock = mock.with_oracle(labels, cfg.error_rate, cfg.seed, cfg.cue.clone());
        }
        Ok(mock)
    }

    pub fn with_scripts(mut self, scripts: Vec<ScriptRecord>) -> Self {
        self.failures_used = Mutex::new(vec![0; scripts.len()]);
        self.scripts = scripts;
        self
    }

    pub fn with_oracle(
        mut self,
        labels: Vec<OracleLabel>,
        error_rate: f64,
        seed: u64,
        cue: Option<String>,
    ) -> Self {
        let labels = labels.into_iter().map(|l| (l.id.clone(), l)).collect();
        self.oracle = Some(Oracle {
            labels,
            error_rate,
            seed,
            cue,
        });
        self
    }

    /// Adds or replaces oracle labels, creating a zero-error oracle if needed.
    pub fn add_oracle_labels(&mut self, labels: impl IntoIterator<Item = OracleLabel>) {
        let oracle = self.oracle.get_or_insert_with(|| Oracle {
            labels: HashMap::new(),
            error_rate: 0.0,
            seed: 0,
            cue: None,
        });
        for l in labels {
            oracle.labels.insert(l.id.clone(), l);
        }
    }

    /// Simulated per-call latency.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("mock lock").len()
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().expect("mock lock").clone()
    }

    pub fn reset_calls(&self) {
        self.calls.lock().expect("mock lock").clear();
    }

    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn respond(&self, request: &ChatRequest, key: &str) -> Result<BackendReply, BackendFailure> {
        if let Some(i) = self.scripts.iter().position(|s| s.matches(request, key)) {
            let script = &self.scripts[i];
            if script.always_fail {
                return Err(script.failure.into_failure());
            }
            let mut used = self.failures_used.lock().expect("mock lock");
            if used[i] < script.fail_times {
                used[i] += 1;
                return Err(script.failure.into_failure());
            }
            return Ok(BackendReply {
                text: script.reply.clone(),
                usage: script.usage,
            });
        }
        if let Some(text) = self.oracle.as_ref().and_then(|o| o.answer(request)) {
            return Ok(BackendReply { text, usage: None });
        }
        Err(BackendFailure::Http {
            status: 404,
            body: "mock: no scripted reply matches this request".into(),
        })
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl Backend for MockBackend {
    fn send(
        &self,
        _spec: &ModelSpec,
        request: &ChatRequest,
        key: &str,
    ) -> Result<BackendReply, BackendFailure> {
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.calls.lock().expect("mock lock").push(RecordedCall {
            item_id: request.trace.item_id.clone(),
            purpose: request.trace.purpose,
            system: request.system.clone(),
            user: request.user.clone(),
            image_digest: request.image.as_ref().map(|i| i.digest().to_string()),
            image_size: request.image.as_ref().map(|i| (i.width, i.height)),
            cache_key: key.to_string(),
        });
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let out = self.respond(request, key);
        self.active.fetch_sub(1, Ordering::SeqCst);
        out
    }
}
