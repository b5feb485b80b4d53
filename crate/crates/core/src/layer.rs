//! The four semantic layers a driving scene is decomposed into, and sets of them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One facet of a driving scene. Variant order is the canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SceneLayer {
    Street,
    Infrastructure,
    MovableObjects,
    Environment,
}

impl SceneLayer {
    /// All layers in canonical order.
    pub const ALL: [SceneLayer; 4] = [
        SceneLayer::Street,
        SceneLayer::Infrastructure,
        SceneLayer::MovableObjects,
        SceneLayer::Environment,
    ];

    pub fn code(self) -> char {
        match self {
            SceneLayer::Street => 'S',
            SceneLayer::Infrastructure => 'I',
            SceneLayer::MovableObjects => 'M',
            SceneLayer::Environment => 'E',
        }
    }

    pub fn from_code(code: char) -> Option<SceneLayer> {
        match code.to_ascii_uppercase() {
            'S' => Some(SceneLayer::Street),
            'I' => Some(SceneLayer::Infrastructure),
            'M' => Some(SceneLayer::MovableObjects),
            'E' => Some(SceneLayer::Environment),
            _ => None,
        }
    }

    /// Human-readable name used in prompts and section headers.
    pub fn display_name(self) -> &'static str {
        match self {
            SceneLayer::Street => "Street",
            SceneLayer::Infrastructure => "Infrastructure",
            SceneLayer::MovableObjects => "Movable Objects",
            SceneLayer::Environment => "Environment",
        }
    }

    /// Stable snake_case identifier used in file names and asset keys.
    pub fn slug(self) -> &'static str {
        match self {
            SceneLayer::Street => "street",
            SceneLayer::Infrastructure => "infrastructure",
            SceneLayer::MovableObjects => "movable_objects",
            SceneLayer::Environment => "environment",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn bit(self) -> u8 {
        1 << self.index()
    }

    /// Parses a one-letter code, a display name or a slug (case-insensitive).
    pub fn parse_token(token: &str) -> Option<SceneLayer> {
        let t = token.trim();
        let mut chars = t.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            return SceneLayer::from_code(c);
        }
        let norm: String = t
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "street" => Some(SceneLayer::Street),
            "infrastructure" => Some(SceneLayer::Infrastructure),
            "movableobjects" | "movable" | "objects" => Some(SceneLayer::MovableObjects),
            "environment" | "environmental" => Some(SceneLayer::Environment),
            _ => None,
        }
    }
}

impl fmt::Display for SceneLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for SceneLayer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SceneLayer::parse_token(s).ok_or_else(|| format!("unknown scene layer `{s}`"))
    }
}

impl Serialize for SceneLayer {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code().encode_utf8(&mut [0; 4]))
    }
}

impl<'de> Deserialize<'de> for SceneLayer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A set of layers. Iteration is always in canonical order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerSet(u8);

impl LayerSet {
    pub const EMPTY: LayerSet = LayerSet(0);

    pub fn new() -> Self {
        LayerSet(0)
    }

    pub fn all() -> Self {
        SceneLayer::ALL.into_iter().collect()
    }

    /// Builds the set from the low four bits (bit i = `SceneLayer::ALL[i]`).
    pub fn from_bits(bits: u8) -> Self {
        LayerSet(bits & 0x0f)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn insert(&mut self, layer: SceneLayer) {
        self.0 |= layer.bit();
    }

    pub fn remove(&mut self, layer: SceneLayer) {
        self.0 &= !layer.bit();
    }

    pub fn contains(self, layer: SceneLayer) -> bool {
        self.0 & layer.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = SceneLayer> {
        SceneLayer::ALL
            .into_iter()
            .filter(move |l| self.contains(*l))
    }

    /// Comma-separated one-letter codes in canonical order, e.g. `S, M`.
    pub fn codes(self) -> String {
        let codes: Vec<String> = self.iter().map(|l| l.code().to_string()).collect();
        codes.join(", ")
    }
}

impl FromIterator<SceneLayer> for LayerSet {
    fn from_iter<T: IntoIterator<Item = SceneLayer>>(iter: T) -> Self {
        let mut set = LayerSet::new();
        for layer in iter {
            set.insert(layer);
        }
        set
    }
}

impl Serialize for LayerSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for LayerSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let layers = Vec::<SceneLayer>::deserialize(deserializer)?;
        Ok(layers.into_iter().collect())
    }
}

/// Letter order used for combination keys: E, S, I, M.
const KEY_ORDER: [SceneLayer; 4] = [
    SceneLayer::Environment,
    SceneLayer::Street,
    SceneLayer::Infrastructure,
    SceneLayer::MovableObjects,
];

/// Key for a layer combination, e.g. `E.S.I.M` or `I.M`; `none` for the empty set.
pub fn combination_key(flags: LayerSet) -> String {
    if flags.is_empty() {
        return "none".to_string();
    }
    let parts: Vec<String> = KEY_ORDER
        .iter()
        .filter(|l| flags.contains(**l))
        .map(|l| l.code().to_string())
        .collect();
    parts.join(".")
}
