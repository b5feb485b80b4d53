//! Fine-tuning export in the chat `messages` JSONL format.
//!
//! `single_shot` writes one conversation per item (image to verdict).
//! `pipeline` writes two: image to layered scene description, then image plus
//! description to verdict. The data file holds conversations only; a
//! `<file>.meta.json` sidecar carries the format header and counts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{io_err, Dataset, DatasetRecord, DatastoreError, ReviewState};
use crate::imageprep::{encode_for_wire, resize, ImageInput, ResolutionLevel};
use crate::label::Provenance;
use crate::layer::SceneLayer;
use crate::pipeline::MethodId;
use crate::prompt::{PromptProgram, TemplateRole};
use crate::scene::section_header;
use crate::verdict::{render_answer_block, ANSWER_SCHEMA};

pub const FINETUNE_FORMAT: &str = "scenelayers/finetune";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportMode {
    SingleShot,
    Pipeline,
}

impl std::str::FromStr for ExportMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "single_shot" => Ok(ExportMode::SingleShot),
            "pipeline" => Ok(ExportMode::Pipeline),
            other => Err(format!(
                "unknown export mode `{other}` (expected single_shot or pipeline)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExportOptions {
    pub mode: ExportMode,
    pub resolution: ResolutionLevel,
    /// Templates for the prompts; defaults to the `image` program for
    /// single-shot and the `full` program for pipeline.
    pub program: Option<PromptProgram>,
}

impl ExportOptions {
    pub fn new(mode: ExportMode) -> Self {
        ExportOptions {
            mode,
            resolution: ResolutionLevel::default(),
            program: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub format: String,
    pub version: u32,
    pub mode: ExportMode,
    pub resolution: ResolutionLevel,
    pub items: usize,
    pub conversations: usize,
    pub excluded_unreviewed: usize,
    pub output: PathBuf,
}

/// Curated records: reviewed, or carrying a manual gold label.
fn curated(r: &DatasetRecord) -> bool {
    r.gold.is_some()
        && (r.review != ReviewState::Unreviewed
            || r.gold
                .as_ref()
                .is_some_and(|g| g.provenance == Provenance::Manual))
}

fn user_message(text: String, image_uri: &str) -> Value {
    json!({
        "role": "user",
        "content": [
            {"type": "text", "text": text},
            {"type": "image_url", "image_url": {"url": image_uri}},
        ],
    })
}

fn conversation(user: Value, assistant: &str) -> Value {
    json!({"messages": [user, {"role": "assistant", "content": assistant}]})
}

fn gold_answer(r: &DatasetRecord) -> String {
    let gold = r.gold.as_ref().expect("curated records have gold");
    let model = r.annotation.as_ref().and_then(|a| a.verdict.as_ref());
    let rationale = match model {
        Some(v)
            if v.classification() == Some(gold.is_anomalous) && !v.rationale.trim().is_empty() =>
        {
            v.rationale.trim()
        }
        _ => "Label set by a human reviewer.",
    };
    render_answer_block(gold.is_anomalous, gold.layer_flags, rationale)
}

fn layered_request(program: &PromptProgram) -> Result<String, DatastoreError> {
    let mut text = String::from(
        "Describe this driving scene one layer at a time, using one section per layer with the headers shown.",
    );
    for layer in SceneLayer::ALL {
        let t = program
            .get(TemplateRole::LayerExtraction(layer))
            .map_err(|e| DatastoreError::Other(e.to_string()))?;
        text.push_str(&format!("\n\n{}\n{}", section_header(layer), t.render(&[])));
    }
    Ok(text)
}

pub fn export_finetune(
    dataset: &Dataset,
    output: &Path,
    opts: &ExportOptions,
) -> Result<ExportSummary, DatastoreError> {
    let (included, excluded): (Vec<&DatasetRecord>, Vec<&DatasetRecord>) =
        dataset.records.iter().partition(|r| curated(r));
    if opts.mode == ExportMode::Pipeline {
        let missing: Vec<String> = included
            .iter()
            .filter(|r| {
                r.annotation
                    .as_ref()
                    .and_then(|a| a.scene.as_ref())
                    .is_none()
            })
            .map(|r| r.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(DatastoreError::MissingDescriptions(missing));
        }
    }
    let program = opts.program.clone().unwrap_or_else(|| match opts.mode {
        ExportMode::SingleShot => MethodId::Image.default_program(),
        ExportMode::Pipeline => MethodId::Full.default_program(),
    });
    let role = match opts.mode {
        ExportMode::SingleShot => TemplateRole::Direct,
        ExportMode::Pipeline => TemplateRole::Evaluation,
    };
    let verdict_template = program
        .get(role)
        .map_err(|e| DatastoreError::Other(e.to_string()))?;
    let describe_text = match opts.mode {
        ExportMode::Pipeline => Some(layered_request(&program)?),
        ExportMode::SingleShot => None,
    };

    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(output).map_err(io_err(output))?;
    let mut w = BufWriter::new(file);
    let mut conversations = 0;
    for r in &included {
        let image = ImageInput::from_path(&r.id, dataset.image_path(r))
            .and_then(|i| resize(&i, opts.resolution))
            .and_then(|i| encode_for_wire(&i))
            .map_err(|e| DatastoreError::Other(format!("item `{}`: {e}", r.id)))?;
        let mut lines = Vec::new();
        let scene_text = r
            .annotation
            .as_ref()
            .and_then(|a| a.scene.as_ref())
            .map(|s| s.aggregate_text());
        if let (Some(ask), Some(scene)) = (&describe_text, scene_text) {
            lines.push(conversation(user_message(ask.clone(), &image), scene));
        }
        let verdict_prompt = verdict_template.render(&[
            ("scene", scene_text.unwrap_or("")),
            ("answer_schema", ANSWER_SCHEMA),
        ]);
        lines.push(conversation(
            user_message(verdict_prompt, &image),
            &gold_answer(r),
        ));
        for l in lines {
            writeln!(w, "{l}").map_err(io_err(output))?;
            conversations += 1;
        }
    }
    w.flush().map_err(io_err(output))?;

    let summary = ExportSummary {
        format: FINETUNE_FORMAT.into(),
        version: super::FORMAT_VERSION,
        mode: opts.mode,
        resolution: opts.resolution,
        items: included.len(),
        conversations,
        excluded_unreviewed: excluded.len(),
        output: output.to_path_buf(),
    };
    let meta = sidecar_path(output);
    fs::write(
        &meta,
        serde_json::to_string_pretty(&summary).expect("summary") + "\n",
    )
    .map_err(io_err(&meta))?;
    Ok(summary)
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".meta.json");
    output.with_file_name(name)
}
