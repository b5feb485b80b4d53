//! Prompt templates, prompt programs and the on-disk prompt-asset format.
//!
//! A template instruction is plain text with `{{name}}` placeholders. Rendering
//! substitutes the given values and appends the template's demonstrations.
//!
//! A prompt-asset directory holds `program.json` (roles, names, demos) and one
//! `<name>.txt` instruction file per template.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layer::SceneLayer;

/// Version tag of the shipped default prompt texts.
pub const PROMPT_ASSET_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "snake_case")]
pub enum TemplateRole {
    LayerExtraction(SceneLayer),
    Evaluation,
    Direct,
    BaselineDescription,
}

impl TemplateRole {
    /// Whether replies to this role are verdicts (as opposed to free text).
    pub fn yields_verdict(self) -> bool {
        matches!(self, TemplateRole::Evaluation | TemplateRole::Direct)
    }
}

/// An (input summary, ideal output) demonstration pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demo {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub role: TemplateRole,
    pub instruction: String,
    #[serde(default)]
    pub demos: Vec<Demo>,
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        role: TemplateRole,
        instruction: impl Into<String>,
    ) -> Self {
        PromptTemplate {
            name: name.into(),
            role,
            instruction: instruction.into(),
            demos: Vec::new(),
        }
    }

    /// Substitutes `{{key}}` placeholders and appends demos. Unknown
    /// placeholders are left untouched.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.instruction.trim_end().to_string();
        for (key, value) in vars {
            out = out.replace(&format!("{{{{{key}}}}}"), value);
        }
        if !self.demos.is_empty() {
            out.push_str("\n\nWorked examples:");
            for (i, demo) in self.demos.iter().enumerate() {
                out.push_str(&format!(
                    "\n\nExample {}\nInput: {}\nOutput: {}",
                    i + 1,
                    demo.input.trim(),
                    demo.output.trim()
                ));
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt assets at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("prompt assets at {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("prompt program has no template with role {0:?}")]
    MissingRole(TemplateRole),
}

/// The full set of templates one method uses.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptProgram {
    pub templates: Vec<PromptTemplate>,
}

impl PromptProgram {
    pub fn new(templates: Vec<PromptTemplate>) -> Self {
        PromptProgram { templates }
    }

    pub fn get(&self, role: TemplateRole) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .iter()
            .find(|t| t.role == role)
            .ok_or(PromptError::MissingRole(role))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut PromptTemplate> {
        self.templates.iter_mut().find(|t| t.name == name)
    }

    pub fn roles(&self) -> Vec<TemplateRole> {
        let mut roles: Vec<TemplateRole> = self.templates.iter().map(|t| t.role).collect();
        roles.sort();
        roles
    }

    /// Writes the program as a prompt-asset directory.
    pub fn save_dir(&self, dir: &Path, method: &str) -> Result<(), PromptError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| PromptError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut entries = Vec::new();
        for t in &self.templates {
            let file = format!("{}.txt", t.name);
            let path = dir.join(&file);
            fs::write(&path, &t.instruction).map_err(io(&path))?;
            entries.push(AssetEntry {
                name: t.name.clone(),
                role: t.role,
                file,
                demos: t.demos.clone(),
            });
        }
        let manifest = AssetManifest {
            version: PROMPT_ASSET_VERSION.to_string(),
            method: method.to_string(),
            templates: entries,
        };
        let path = dir.join("program.json");
        let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        fs::write(&path, json + "\n").map_err(io(&path))
    }

    /// Loads a prompt-asset directory. Returns the program and the method it was saved for.
    pub fn load_dir(dir: &Path) -> Result<(PromptProgram, String), PromptError> {
        let path = dir.join("program.json");
        let text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
            path: path.clone(),
            source,
        })?;
        let manifest: AssetManifest =
            serde_json::from_str(&text).map_err(|e| PromptError::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        let mut templates = Vec::new();
        for entry in manifest.templates {
            let file = dir.join(&entry.file);
            let instruction = fs::read_to_string(&file).map_err(|source| PromptError::Io {
                path: file.clone(),
                source,
            })?;
            templates.push(PromptTemplate {
                name: entry.name,
                role: entry.role,
                instruction,
                demos: entry.demos,
            });
        }
        Ok((PromptProgram { templates }, manifest.method))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AssetManifest {
    version: String,
    method: String,
    templates: Vec<AssetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AssetEntry {
    name: String,
    role: TemplateRole,
    file: String,
    #[serde(default)]
    demos: Vec<Demo>,
}

/// Shipped default instruction texts, keyed by asset name.
pub fn default_assets() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        (
            "layer_street",
            include_str!("../assets/prompts/layer_street.txt"),
        ),
        (
            "layer_infrastructure",
            include_str!("../assets/prompts/layer_infrastructure.txt"),
        ),
        (
            "layer_movable_objects",
            include_str!("../assets/prompts/layer_movable_objects.txt"),
        ),
        (
            "layer_environment",
            include_str!("../assets/prompts/layer_environment.txt"),
        ),
        (
            "describe_scene",
            include_str!("../assets/prompts/describe_scene.txt"),
        ),
        (
            "evaluate_layered_image",
            include_str!("../assets/prompts/evaluate_layered_image.txt"),
        ),
        (
            "evaluate_layered_text",
            include_str!("../assets/prompts/evaluate_layered_text.txt"),
        ),
        (
            "evaluate_scene_image",
            include_str!("../assets/prompts/evaluate_scene_image.txt"),
        ),
        (
            "evaluate_scene_text",
            include_str!("../assets/prompts/evaluate_scene_text.txt"),
        ),
        (
            "direct_plain",
            include_str!("../assets/prompts/direct_plain.txt"),
        ),
        (
            "direct_layered",
            include_str!("../assets/prompts/direct_layered.txt"),
        ),
        (
            "propose_instruction",
            include_str!("../assets/prompts/propose_instruction.txt"),
        ),
    ])
}

/// A default template built from a shipped asset.
pub fn default_template(asset: &str, role: TemplateRole) -> PromptTemplate {
    let text = default_assets()
        .get(asset)
        .copied()
        .unwrap_or_else(|| panic!("no shipped prompt asset `{asset}`"));
    PromptTemplate::new(asset, role, text)
}

/// Default per-layer extraction template.
pub fn layer_template(layer: SceneLayer) -> PromptTemplate {
    default_template(
        &format!("layer_{}", layer.slug()),
        TemplateRole::LayerExtraction(layer),
    )
}
