//! Anomaly verdicts and the parser that turns model completions into them.
//!
//! Prompts ask the model to finish with a fenced answer block:
//!
//! ````text
//! ```answer
//! verdict: yes
//! layers: S, M
//! rationale: a traffic light is mounted on a moving truck
//! ```
//! ````
//!
//! Parsing tries that schema first (fenced or bare key/value lines, newline or
//! ` / ` separated), then falls back to standalone yes/no tokens, and otherwise
//! reports the text as unparseable.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::layer::{LayerSet, SceneLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed,
    FallbackParsed,
    Unparseable,
}

/// A classification produced by a model.
///
/// `is_anomalous` is `None` exactly when `parse_status` is `Unparseable`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub is_anomalous: Option<bool>,
    pub layer_flags: LayerSet,
    pub rationale: String,
    pub parse_status: ParseStatus,
}

impl AnomalyVerdict {
    /// A parsed verdict. Flags are dropped for a normal verdict.
    pub fn new(is_anomalous: bool, layer_flags: LayerSet, rationale: impl Into<String>) -> Self {
        Self::with_status(is_anomalous, layer_flags, rationale, ParseStatus::Parsed)
    }

    fn with_status(
        is_anomalous: bool,
        layer_flags: LayerSet,
        rationale: impl Into<String>,
        parse_status: ParseStatus,
    ) -> Self {
        AnomalyVerdict {
            is_anomalous: Some(is_anomalous),
            layer_flags: if is_anomalous {
                layer_flags
            } else {
                LayerSet::EMPTY
            },
            rationale: rationale.into(),
            parse_status,
        }
    }

    fn unparseable(text: &str) -> Self {
        AnomalyVerdict {
            is_anomalous: None,
            layer_flags: LayerSet::EMPTY,
            rationale: text.trim().to_string(),
            parse_status: ParseStatus::Unparseable,
        }
    }

    /// The binary classification, if the text carried one.
    pub fn classification(&self) -> Option<bool> {
        self.is_anomalous
    }

    /// Renders this verdict through the answer schema.
    pub fn render(&self) -> String {
        render_answer_block(
            self.is_anomalous.unwrap_or(false),
            self.layer_flags,
            &self.rationale,
        )
    }
}

/// Renders the fenced answer block for a classification.
pub fn render_answer_block(is_anomalous: bool, flags: LayerSet, rationale: &str) -> String {
    let layers = if !is_anomalous || flags.is_empty() {
        "none".to_string()
    } else {
        flags.codes()
    };
    format!(
        "```answer\nverdict: {}\nlayers: {}\nrationale: {}\n```",
        if is_anomalous { "yes" } else { "no" },
        layers,
        rationale.trim()
    )
}

/// Instructions describing the answer block; embedded in every classification prompt.
pub const ANSWER_SCHEMA: &str = "Finish your reply with exactly one fenced block in this format:\n\
```answer\n\
verdict: yes | no\n\
layers: comma-separated layer codes among S (Street), I (Infrastructure), M (Movable Objects), E (Environment), or none\n\
rationale: one or two sentences\n\
```";

fn key_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)(?:^|[/;|])[ \t]*(?:[-*][ \t]*)?\b(verdict|layers|rationale)[ \t]*[:=]")
            .expect("static regex")
    })
}

fn fence_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z]*[ \t]*\n(.*?)```").expect("static regex"))
}

fn parse_bool_word(value: &str) -> Option<bool> {
    let word: String = value
        .trim()
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    match word.as_str() {
        "yes" | "true" | "anomalous" | "anomaly" | "1" => Some(true),
        "no" | "false" | "normal" | "0" => Some(false),
        _ => None,
    }
}

fn parse_layers(value: &str) -> LayerSet {
    let v = value.trim().to_ascii_lowercase();
    if v.is_empty() || v == "none" || v == "-" || v == "n/a" {
        return LayerSet::EMPTY;
    }
    v.split(|c: char| !c.is_ascii_alphanumeric() && c != '_')
        .filter(|t| !t.is_empty())
        .filter_map(SceneLayer::parse_token)
        .collect()
}

fn trim_value(value: &str) -> &str {
    value
        .trim()
        .trim_end_matches(['/', ';', '|'])
        .trim()
}

/// Key/value parse of one region. Returns `None` without a readable verdict key.
fn parse_fields(region: &str) -> Option<(bool, LayerSet, String)> {
    let keys: Vec<(usize, usize, String)> = key_regex()
        .captures_iter(region)
        .map(|c| {
            let whole = c.get(0).expect("group 0");
            (whole.start(), whole.end(), c[1].to_ascii_lowercase())
        })
        .collect();
    let mut verdict = None;
    let mut layers = LayerSet::EMPTY;
    let mut rationale = String::new();
    for (i, (_, value_start, key)) in keys.iter().enumerate() {
        let value_end = keys.get(i + 1).map_or(region.len(), |next| next.0);
        let value = trim_value(&region[*value_start..value_end]);
        match key.as_str() {
            "verdict" if verdict.is_none() => verdict = parse_bool_word(value),
            "layers" => layers = parse_layers(value),
            "rationale" => rationale = value.to_string(),
            _ => {}
        }
    }
    verdict.map(|v| (v, layers, rationale))
}

fn structured(text: &str) -> Option<AnomalyVerdict> {
    for block in fence_regex().captures_iter(text) {
        if let Some((v, flags, rationale)) = parse_fields(&block[1]) {
            return Some(AnomalyVerdict::new(v, flags, rationale));
        }
    }
    parse_fields(text).map(|(v, flags, rationale)| AnomalyVerdict::new(v, flags, rationale))
}

/// Maximum distance in words between a yes/no token and an `anomal*` word.
const FALLBACK_WINDOW: usize = 6;

fn fallback(text: &str) -> Option<bool> {
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect();
    let yes_no = |t: &str| match t {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    };
    if let Some(first) = tokens.first().and_then(|t| yes_no(t)) {
        return Some(first);
    }
    let anchors: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.starts_with("anomal"))
        .map(|(i, _)| i)
        .collect();
    let mut found = None;
    for (i, t) in tokens.iter().enumerate() {
        let Some(answer) = yes_no(t) else { continue };
        if anchors.iter().any(|a| a.abs_diff(i) <= FALLBACK_WINDOW) {
            match found {
                None => found = Some(answer),
                Some(prev) if prev != answer => return None,
                Some(_) => {}
            }
        }
    }
    found
}

/// Parses a raw completion into a verdict. Total: never fails.
pub fn parse_verdict(model_text: &str) -> AnomalyVerdict {
    if let Some(verdict) = structured(model_text) {
        return verdict;
    }
    match fallback(model_text) {
        Some(answer) => AnomalyVerdict::with_status(
            answer,
            LayerSet::EMPTY,
            model_text.trim(),
            ParseStatus::FallbackParsed,
        ),
        None => AnomalyVerdict::unparseable(model_text),
    }
}
