//! Per-layer descriptions and their aggregate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layer::SceneLayer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescription {
    pub layer: SceneLayer,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_flag: Option<bool>,
}

impl LayerDescription {
    pub fn new(layer: SceneLayer, text: impl Into<String>) -> Self {
        LayerDescription {
            layer,
            text: text.into(),
            anomaly_flag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("layer {0} described more than once")]
    Duplicate(SceneLayer),
    #[error("missing description for layer {0}")]
    Missing(SceneLayer),
}

/// All four layer descriptions in canonical order plus their rendered aggregate.
///
/// Construct through [`aggregate`]; the fields are private so the invariants hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SceneDescription {
    layers: Vec<LayerDescription>,
    aggregate_text: String,
}

impl SceneDescription {
    pub fn layers(&self) -> &[LayerDescription] {
        &self.layers
    }

    pub fn layer(&self, layer: SceneLayer) -> &LayerDescription {
        &self.layers[layer.index()]
    }

    pub fn aggregate_text(&self) -> &str {
        &self.aggregate_text
    }

    /// Returns a copy with one layer's text replaced.
    pub fn with_layer_text(&self, layer: SceneLayer, text: impl Into<String>) -> SceneDescription {
        let mut layers = self.layers.clone();
        layers[layer.index()].text = text.into();
        aggregate(layers).expect("layers already complete")
    }
}

impl<'de> Deserialize<'de> for SceneDescription {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            layers: Vec<LayerDescription>,
        }
        let raw = Raw::deserialize(deserializer)?;
        aggregate(raw.layers).map_err(serde::de::Error::custom)
    }
}

/// Section header preceding each layer's text in the aggregate.
pub fn section_header(layer: SceneLayer) -> String {
    format!("## {} layer", layer.display_name())
}

/// Combines exactly one description per layer into a scene description.
///
/// Input order does not matter; output is always in canonical layer order.
pub fn aggregate(
    descriptions: impl IntoIterator<Item = LayerDescription>,
) -> Result<SceneDescription, AggregateError> {
    let mut slots: [Option<LayerDescription>; 4] = Default::default();
    for d in descriptions {
        let slot = &mut slots[d.layer.index()];
        if slot.is_some() {
            return Err(AggregateError::Duplicate(d.layer));
        }
        *slot = Some(d);
    }
    let mut layers = Vec::with_capacity(4);
    for (layer, slot) in SceneLayer::ALL.into_iter().zip(slots) {
        layers.push(slot.ok_or(AggregateError::Missing(layer))?);
    }
    let sections: Vec<String> = layers
        .iter()
        .map(|d| format!("{}\n{}", section_header(d.layer), d.text.trim()))
        .collect();
    Ok(SceneDescription {
        aggregate_text: sections.join("\n\n"),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four() -> Vec<LayerDescription> {
        SceneLayer::ALL
            .into_iter()
            .zip(["wet", "signals", "truck", "fog"])
            .map(|(l, t)| LayerDescription::new(l, t))
            .collect()
    }

    #[test]
    fn headers_in_canonical_order() {
        let scene = aggregate(four()).unwrap();
        let text = scene.aggregate_text();
        let positions: Vec<usize> = ["Street", "Infrastructure", "Movable Objects", "Environment"]
            .iter()
            .map(|h| text.find(&format!("## {h} layer")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn permutation_invariant() {
        let mut reversed = four();
        reversed.reverse();
        assert_eq!(aggregate(reversed).unwrap(), aggregate(four()).unwrap());
    }

    #[test]
    fn missing_and_duplicate() {
        let mut v = four();
        v.pop();
        assert_eq!(
            aggregate(v).unwrap_err(),
            AggregateError::Missing(SceneLayer::Environment)
        );
        let mut v = four();
        v[3] = LayerDescription::new(SceneLayer::Street, "again");
        assert_eq!(
            aggregate(v).unwrap_err(),
            AggregateError::Duplicate(SceneLayer::Street)
        );
    }

    #[test]
    fn layer_order_matches_iteration_order() {
        // Two independent iteration sites must agree on canonical order.
        let scene = aggregate(four()).unwrap();
        let from_scene: Vec<SceneLayer> = scene.layers().iter().map(|d| d.layer).collect();
        let from_set: Vec<SceneLayer> = crate::layer::LayerSet::all().iter().collect();
        assert_eq!(from_scene, from_set);
    }

    #[test]
    fn serde_round_trip() {
        let scene = aggregate(four()).unwrap();
        let json = serde_json::to_string(&scene).unwrap();
        let back: SceneDescription = serde_json::from_str(&json).unwrap();
        assert_eq!(back, scene);
    }
}
