//! Layered two-phase semantic anomaly detection for driving imagery.
//!
//! A scene is decomposed into four semantic layers (street, infrastructure,
//! movable objects, environment). Phase 1 asks a vision-language model for one
//! description per layer; Phase 2 classifies the scene from the image plus the
//! aggregated description. Around that pipeline this crate provides a batch
//! evaluation harness, a budgeted prompt optimizer, dataset tooling
//! (manifests, balanced splits, auto-labeling, curation log, fine-tune export)
//! and a model gateway with caching, retries and cost accounting.

pub mod datastore;
pub mod exec;
pub mod gateway;
pub mod harness;
pub mod imageprep;
pub mod label;
pub mod layer;
pub mod pipeline;
pub mod prompt;
pub mod promptopt;
pub mod scene;
pub mod verdict;

pub use label::{validate_gold, GoldLabel, LabelRule, Provenance, Validation};
pub use layer::{combination_key, LayerSet, SceneLayer};
pub use scene::{aggregate, LayerDescription, SceneDescription};
pub use verdict::{parse_verdict, AnomalyVerdict, ParseStatus};
