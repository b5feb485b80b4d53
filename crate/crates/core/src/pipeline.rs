//! The two-phase method executor and the eight method configurations.
//!
//! | method           | input                 | layered | optimized | queries |
//! |------------------|-----------------------|---------|-----------|---------|
//! | `image_baseline` | image                 | no      | no        | 1       |
//! | `text_baseline`  | description           | no      | no        | 2       |
//! | `baseline`       | image + description   | no      | no        | 2       |
//! | `image`          | image                 | yes     | no        | 1       |
//! | `text`           | description           | yes     | no        | 5       |
//! | `text_opt`       | description           | yes     | yes       | 5       |
//! | `full`           | image + description   | yes     | no        | 5       |
//! | `full_opt`       | image + description   | yes     | yes       | 5       |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::par_map;
use crate::gateway::{ChatRequest, ChatResponse, Gateway, GatewayError, QueryPurpose};
use crate::imageprep::{resize, ImageError, ImageInput, ResolutionLevel};
use crate::layer::SceneLayer;
use crate::prompt::{
    default_template, layer_template, PromptError, PromptProgram, PromptTemplate, TemplateRole,
};
use crate::scene::{aggregate, AggregateError, LayerDescription, SceneDescription};
use crate::verdict::{AnomalyVerdict, ParseStatus, ANSWER_SCHEMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    ImageBaseline,
    TextBaseline,
    Baseline,
    Image,
    Text,
    TextOpt,
    Full,
    FullOpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    ImageOnly,
    DescriptionOnly,
    ImagePlusDescription,
}

impl MethodId {
    pub const ALL: [MethodId; 8] = [
        MethodId::ImageBaseline,
        MethodId::TextBaseline,
        MethodId::Baseline,
        MethodId::Image,
        MethodId::Text,
        MethodId::TextOpt,
        MethodId::Full,
        MethodId::FullOpt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::ImageBaseline => "image_baseline",
            MethodId::TextBaseline => "text_baseline",
            MethodId::Baseline => "baseline",
            MethodId::Image => "image",
            MethodId::Text => "text",
            MethodId::TextOpt => "text_opt",
            MethodId::Full => "full",
            MethodId::FullOpt => "full_opt",
        }
    }

    pub fn layered(self) -> bool {
        matches!(
            self,
            MethodId::Image
                | MethodId::Text
                | MethodId::TextOpt
                | MethodId::Full
                | MethodId::FullOpt
        )
    }

    pub fn optimized(self) -> bool {
        matches!(self, MethodId::TextOpt | MethodId::FullOpt)
    }

    pub fn input_mode(self) -> InputMode {
        match self {
            MethodId::ImageBaseline | MethodId::Image => InputMode::ImageOnly,
            MethodId::TextBaseline | MethodId::Text | MethodId::TextOpt => {
                InputMode::DescriptionOnly
            }
            MethodId::Baseline | MethodId::Full | MethodId::FullOpt => {
                InputMode::ImagePlusDescription
            }
        }
    }

    /// Model queries per item.
    pub fn planned_queries(self) -> usize {
        match self {
            MethodId::ImageBaseline | MethodId::Image => 1,
            MethodId::TextBaseline | MethodId::Baseline => 2,
            MethodId::Text | MethodId::TextOpt | MethodId::Full | MethodId::FullOpt => 5,
        }
    }

    /// Template roles the method's prompt program must cover.
    pub fn required_roles(self) -> Vec<TemplateRole> {
        let mut roles = match self {
            MethodId::ImageBaseline | MethodId::Image => vec![TemplateRole::Direct],
            MethodId::TextBaseline | MethodId::Baseline => {
                vec![TemplateRole::BaselineDescription, TemplateRole::Evaluation]
            }
            _ => {
                let mut r: Vec<TemplateRole> = SceneLayer::ALL
                    .into_iter()
                    .map(TemplateRole::LayerExtraction)
                    .collect();
                r.push(TemplateRole::Evaluation);
                r
            }
        };
        roles.sort();
        roles
    }

    /// Default prompt program built from the shipped assets.
    pub fn default_program(self) -> PromptProgram {
        let layers = || {
            SceneLayer::ALL
                .into_iter()
                .map(layer_template)
                .collect::<Vec<_>>()
        };
        let templates = match self {
            MethodId::ImageBaseline => vec![default_template("direct_plain", TemplateRole::Direct)],
            MethodId::Image => vec![default_template("direct_layered", TemplateRole::Direct)],
            MethodId::TextBaseline => vec![
                default_template("describe_scene", TemplateRole::BaselineDescription),
                default_template("evaluate_scene_text", TemplateRole::Evaluation),
            ],
            MethodId::Baseline => vec![
                default_template("describe_scene", TemplateRole::BaselineDescription),
                default_template("evaluate_scene_image", TemplateRole::Evaluation),
            ],
            MethodId::Text | MethodId::TextOpt => {
                let mut t = layers();
                t.push(default_template(
                    "evaluate_layered_text",
                    TemplateRole::Evaluation,
                ));
                t
            }
            MethodId::Full | MethodId::FullOpt => {
                let mut t = layers();
                t.push(default_template(
                    "evaluate_layered_image",
                    TemplateRole::Evaluation,
                ));
                t
            }
        };
        PromptProgram::new(templates)
    }

    fn sends_image_to_evaluation(self) -> bool {
        self.input_mode() != InputMode::DescriptionOnly
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = MethodId::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown method `{s}`; valid methods: {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: MethodId,
    pub program: PromptProgram,
    pub resolution: ResolutionLevel,
}

impl MethodConfig {
    pub fn new(method: MethodId) -> Self {
        MethodConfig {
            method,
            program: method.default_program(),
            resolution: ResolutionLevel::P360,
        }
    }

    pub fn with_resolution(mut self, resolution: ResolutionLevel) -> Self {
        self.resolution = resolution;
        self
    }

    /// Replaces the prompt program; its roles must match the method's plan exactly.
    pub fn with_program(mut self, program: PromptProgram) -> Result<Self, PipelineError> {
        let expected = self.method.required_roles();
        if program.roles() != expected {
            return Err(PipelineError::Contract(format!(
                "prompt program roles {:?} do not match method {} (expected {:?})",
                program.roles(),
                self.method,
                expected
            )));
        }
        self.program = program;
        Ok(self)
    }

    pub fn layered(&self) -> bool {
        self.method.layered()
    }

    pub fn optimized(&self) -> bool {
        self.method.optimized()
    }

    pub fn input_mode(&self) -> InputMode {
        self.method.input_mode()
    }

    pub fn planned_queries(&self) -> usize {
        self.method.planned_queries()
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: SceneLayer,
        #[source]
        source: GatewayError,
    },
    #[error("{stage}: {source}")]
    Gateway {
        stage: &'static str,
        #[source]
        source: GatewayError,
    },
    #[error("layer {0}: model returned an empty description")]
    EmptyDescription(SceneLayer),
    #[error("model reply has no recognizable verdict")]
    Unparseable { raw: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    Gateway,
    Unparseable,
    Image,
    Contract,
}

/// Why an item produced no verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub category: FailureCategory,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}

impl From<&PipelineError> for ItemFailure {
    fn from(err: &PipelineError) -> Self {
        let category = match err {
            PipelineError::Layer { .. }
            | PipelineError::Gateway { .. }
            | PipelineError::EmptyDescription(_) => FailureCategory::Gateway,
            PipelineError::Unparseable { .. } => FailureCategory::Unparseable,
            PipelineError::Image(_) => FailureCategory::Image,
            PipelineError::Prompt(_) | PipelineError::Aggregate(_) | PipelineError::Contract(_) => {
                FailureCategory::Contract
            }
        };
        let raw_reply = match err {
            PipelineError::Unparseable { raw } => Some(raw.clone()),
            _ => None,
        };
        ItemFailure {
            category,
            message: err.to_string(),
            raw_reply,
        }
    }
}

/// Accounting for one gateway call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub purpose: QueryPurpose,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub image_tokens: u64,
    pub tokens_estimated: bool,
    pub latency_s: f64,
    pub cost: f64,
    pub cache_hit: bool,
    pub attempt_count: u32,
}

impl QueryRecord {
    fn from_response(purpose: QueryPurpose, r: &ChatResponse) -> Self {
        QueryRecord {
            purpose,
            input_tokens: r.input_tokens,
            output_tokens: r.output_tokens,
            image_tokens: r.image_tokens,
            tokens_estimated: r.tokens_estimated,
            latency_s: r.latency_s,
            cost: r.cost,
            cache_hit: r.cache_hit,
            attempt_count: r.attempt_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub verdict: Option<AnomalyVerdict>,
    pub error: Option<ItemFailure>,
    pub scene: Option<SceneDescription>,
    pub queries: Vec<QueryRecord>,
    pub total_latency_s: f64,
    pub total_cost: f64,
}

impl ItemResult {
    /// Binary prediction, when the item succeeded.
    pub fn predicted(&self) -> Option<bool> {
        self.verdict.as_ref().and_then(|v| v.classification())
    }

    pub fn failed(item_id: &str, err: &PipelineError) -> Self {
        ItemResult {
            item_id: item_id.to_string(),
            verdict: None,
            error: Some(ItemFailure::from(err)),
            scene: None,
            queries: Vec::new(),
            total_latency_s: 0.0,
            total_cost: 0.0,
        }
    }
}

/// How scene information is supplied to the evaluation query.
#[derive(Debug, Clone, Copy)]
pub enum SceneContext<'a> {
    None,
    Layered(&'a SceneDescription),
    Unstructured(&'a str),
}

impl SceneContext<'_> {
    fn text(&self) -> Option<&str> {
        match self {
            SceneContext::None => None,
            SceneContext::Layered(s) => Some(s.aggregate_text()),
            SceneContext::Unstructured(t) => Some(t),
        }
    }
}

/// Phase 1 for one layer: one gateway call, the reply is the description.
pub fn describe_layer(
    gateway: &Gateway,
    image: &ImageInput,
    layer: SceneLayer,
    template: &PromptTemplate,
    model: &str,
    item_id: Option<&str>,
) -> Result<(LayerDescription, ChatResponse), PipelineError> {
    if template.role != TemplateRole::LayerExtraction(layer) {
        return Err(PipelineError::Contract(format!(
            "template `{}` is not a {layer} extraction template",
            template.name
        )));
    }
    let request = ChatRequest::new(model, template.render(&[]))
        .with_image(image.clone())
        .with_trace(item_id, QueryPurpose::LayerExtraction(layer));
    let response = gateway
        .complete(&request)
        .map_err(|source| PipelineError::Layer { layer, source })?;
    if response.text.trim().is_empty() {
        return Err(PipelineError::EmptyDescription(layer));
    }
    Ok((LayerDescription::new(layer, response.text.trim()), response))
}

/// Phase 1 for all four layers. Calls may run concurrently; results are in
/// canonical order and the first failing layer (canonical order) is reported.
pub fn extract_layers(
    gateway: &Gateway,
    image: &ImageInput,
    program: &PromptProgram,
    model: &str,
    item_id: Option<&str>,
) -> Result<Vec<(LayerDescription, ChatResponse)>, PipelineError> {
    let templates = SceneLayer::ALL
        .into_iter()
        .map(|l| {
            program
                .get(TemplateRole::LayerExtraction(l))
                .map(|t| (l, t))
        })
        .collect::<Result<Vec<_>, _>>()?;
    par_map(&templates, |(layer, template)| {
        describe_layer(gateway, image, *layer, template, model, item_id)
    })
    .into_iter()
    .collect()
}

/// Phase 2: one classification query. The verdict may be unparseable; callers decide.
pub fn evaluate(
    gateway: &Gateway,
    image: Option<&ImageInput>,
    scene: SceneContext<'_>,
    template: &PromptTemplate,
    model: &str,
    item_id: Option<&str>,
) -> Result<(AnomalyVerdict, ChatResponse), PipelineError> {
    if image.is_none() && matches!(scene, SceneContext::None) {
        return Err(PipelineError::Contract(
            "evaluation needs an image or a scene description".into(),
        ));
    }
    if !template.role.yields_verdict() {
        return Err(PipelineError::Contract(format!(
            "template `{}` does not produce a verdict",
            template.name
        )));
    }
    let scene_text = scene.text().unwrap_or("");
    let user = template.render(&[("scene", scene_text), ("answer_schema", ANSWER_SCHEMA)]);
    let purpose = if template.role == TemplateRole::Direct {
        QueryPurpose::Direct
    } else {
        QueryPurpose::Evaluation
    };
    let mut request = ChatRequest::new(model, user).with_trace(item_id, purpose);
    if let Some(img) = image {
        request = request.with_image(img.clone());
    }
    let response = gateway
        .complete(&request)
        .map_err(|source| PipelineError::Gateway {
            stage: "evaluation",
            source,
        })?;
    Ok((crate::verdict::parse_verdict(&response.text), response))
}

/// Runs one method on one image (resized to the configured resolution).
/// Errors are captured in the result; they never escape.
pub fn run_method(
    gateway: &Gateway,
    config: &MethodConfig,
    image: &ImageInput,
    model: &str,
    item_id: &str,
) -> ItemResult {
    let mut queries = Vec::new();
    let mut scene = None;
    let outcome = run_inner(
        gateway,
        config,
        image,
        model,
        item_id,
        &mut queries,
        &mut scene,
    );
    let total_latency_s = queries.iter().map(|q| q.latency_s).sum();
    let total_cost = queries.iter().map(|q| q.cost).sum();
    let (verdict, error) = match outcome {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(ItemFailure::from(&e))),
    };
    ItemResult {
        item_id: item_id.to_string(),
        verdict,
        error,
        scene,
        queries,
        total_latency_s,
        total_cost,
    }
}

fn run_inner(
    gateway: &Gateway,
    config: &MethodConfig,
    image: &ImageInput,
    model: &str,
    item_id: &str,
    queries: &mut Vec<QueryRecord>,
    scene_out: &mut Option<SceneDescription>,
) -> Result<AnomalyVerdict, PipelineError> {
    let image = resize(image, config.resolution)?;
    let id = Some(item_id);
    let program = &config.program;
    let eval_image = config.method.sends_image_to_evaluation().then_some(&image);

    let (verdict, response) = match config.method {
        MethodId::ImageBaseline | MethodId::Image => {
            let template = program.get(TemplateRole::Direct)?;
            evaluate(
                gateway,
                Some(&image),
                SceneContext::None,
                template,
                model,
                id,
            )?
        }
        MethodId::TextBaseline | MethodId::Baseline => {
            let template = program.get(TemplateRole::BaselineDescription)?;
            let request = ChatRequest::new(model, template.render(&[]))
                .with_image(image.clone())
                .with_trace(id, QueryPurpose::SceneDescription);
            let described =
                gateway
                    .complete(&request)
                    .map_err(|source| PipelineError::Gateway {
                        stage: "scene description",
                        source,
                    })?;
            queries.push(QueryRecord::from_response(
                QueryPurpose::SceneDescription,
                &described,
            ));
            let template = program.get(TemplateRole::Evaluation)?;
            evaluate(
                gateway,
                eval_image,
                SceneContext::Unstructured(described.text.trim()),
                template,
                model,
                id,
            )?
        }
        MethodId::Text | MethodId::TextOpt | MethodId::Full | MethodId::FullOpt => {
            let layers = extract_layers(gateway, &image, program, model, id)?;
            let mut descriptions = Vec::with_capacity(4);
            for (description, response) in layers {
                queries.push(QueryRecord::from_response(
                    QueryPurpose::LayerExtraction(description.layer),
                    &response,
                ));
                descriptions.push(description);
            }
            let scene = aggregate(descriptions)?;
            let template = program.get(TemplateRole::Evaluation)?;
            let out = evaluate(
                gateway,
                eval_image,
                SceneContext::Layered(&scene),
                template,
                model,
                id,
            )?;
            *scene_out = Some(scene);
            out
        }
    };
    let purpose = if matches!(config.method, MethodId::ImageBaseline | MethodId::Image) {
        QueryPurpose::Direct
    } else {
        QueryPurpose::Evaluation
    };
    queries.push(QueryRecord::from_response(purpose, &response));
    if verdict.parse_status == ParseStatus::Unparseable {
        return Err(PipelineError::Unparseable { raw: response.text });
    }
    Ok(verdict)
}
