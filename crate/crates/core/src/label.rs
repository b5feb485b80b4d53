//! Gold labels and their consistency rules.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::layer::LayerSet;

/// Where a gold label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    Model,
    /// A model label a reviewer accepted without edits.
    ModelAccepted,
    ModelThenHumanCorrected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub is_anomalous: bool,
    #[serde(default)]
    pub layer_flags: LayerSet,
    pub provenance: Provenance,
}

impl GoldLabel {
    pub fn new(is_anomalous: bool, layer_flags: LayerSet, provenance: Provenance) -> Self {
        GoldLabel {
            is_anomalous,
            layer_flags,
            provenance,
        }
    }

    pub fn manual(is_anomalous: bool, layer_flags: LayerSet) -> Self {
        Self::new(is_anomalous, layer_flags, Provenance::Manual)
    }
}

/// A named consistency rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// A normal label may not carry layer flags.
    FlagsOnNormalLabel,
    /// Advisory only: anomalous with no layer attributed.
    AnomalousWithoutLayerAttribution,
}

impl LabelRule {
    pub fn message(self) -> &'static str {
        match self {
            LabelRule::FlagsOnNormalLabel => "flags on normal label",
            LabelRule::AnomalousWithoutLayerAttribution => "anomalous without layer attribution",
        }
    }
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

/// Outcome of [`validate_label`]: hard violations and soft advisories.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub violations: Vec<LabelRule>,
    pub advisories: Vec<LabelRule>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violation_messages(&self) -> Vec<String> {
        self.violations
            .iter()
            .map(|r| r.message().to_string())
            .collect()
    }
}

/// Checks the flag/verdict consistency of a bare classification.
pub fn validate_label(is_anomalous: bool, layer_flags: LayerSet) -> Validation {
    let mut out = Validation::default();
    if !is_anomalous && !layer_flags.is_empty() {
        out.violations.push(LabelRule::FlagsOnNormalLabel);
    }
    if is_anomalous && layer_flags.is_empty() {
        out.advisories
            .push(LabelRule::AnomalousWithoutLayerAttribution);
    }
    out
}

pub fn validate_gold(label: &GoldLabel) -> Validation {
    validate_label(label.is_anomalous, label.layer_flags)
}
