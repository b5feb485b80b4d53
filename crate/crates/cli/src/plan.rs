//! Query plans for `--dry-run`. Token counts use the gateway's estimators;
//! replies are assumed to be [`ASSUMED_REPLY_TOKENS`] long, so costs are
//! order-of-magnitude figures.

use scenelayers::gateway::{estimate_tokens, ModelSpec};
use scenelayers::imageprep::{token_scale_factor, ResolutionLevel};
use scenelayers::pipeline::{InputMode, MethodConfig, MethodId};
use scenelayers::prompt::TemplateRole;
use serde::Serialize;

pub const ASSUMED_REPLY_TOKENS: u64 = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryPlan {
    pub method: MethodId,
    pub model: String,
    pub resolution: ResolutionLevel,
    pub items: usize,
    pub queries_per_item: usize,
    pub total_queries: usize,
    pub est_input_tokens: u64,
    pub est_output_tokens: u64,
    pub est_cost: f64,
}

pub fn plan(config: &MethodConfig, spec: &ModelSpec, items: usize) -> QueryPlan {
    let image_tokens = (f64::from(spec.image_base_tokens)
        * token_scale_factor(config.resolution, ResolutionLevel::P360))
    .round() as u64;
    let scene_tokens = if config.layered() {
        4 * ASSUMED_REPLY_TOKENS
    } else {
        ASSUMED_REPLY_TOKENS
    };
    let per_item_input: u64 = config
        .program
        .templates
        .iter()
        .map(|t| {
            let text = estimate_tokens(&t.instruction, None, 0);
            match t.role {
                TemplateRole::LayerExtraction(_)
                | TemplateRole::BaselineDescription
                | TemplateRole::Direct => text + image_tokens,
                TemplateRole::Evaluation => {
                    let image = if config.input_mode() == InputMode::DescriptionOnly {
                        0
                    } else {
                        image_tokens
                    };
                    text + scene_tokens + image
                }
            }
        })
        .sum();
    let q = config.planned_queries();
    let est_input_tokens = per_item_input * items as u64;
    let est_output_tokens = ASSUMED_REPLY_TOKENS * (q * items) as u64;
    QueryPlan {
        method: config.method,
        model: spec.name.clone(),
        resolution: config.resolution,
        items,
        queries_per_item: q,
        total_queries: q * items,
        est_input_tokens,
        est_output_tokens,
        est_cost: spec.cost(est_input_tokens, est_output_tokens),
    }
}

impl std::fmt::Display for QueryPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "method            {}", self.method)?;
        writeln!(f, "model             {}", self.model)?;
        writeln!(f, "resolution        {}", self.resolution)?;
        writeln!(f, "items             {}", self.items)?;
        writeln!(f, "queries per item  {}", self.queries_per_item)?;
        writeln!(f, "total queries     {}", self.total_queries)?;
        writeln!(f, "est. tokens in    {}", self.est_input_tokens)?;
        writeln!(f, "est. tokens out   {}", self.est_output_tokens)?;
        write!(f, "est. cost         {:.4}", self.est_cost)
    }
}
