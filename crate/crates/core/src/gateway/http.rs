//! OpenAI-compatible chat-completions client (blocking).

use std::time::Duration;

use serde_json::{json, Value};

use super::{
    Backend, BackendFailure, BackendReply, ChatRequest, Endpoint, GatewayError, ModelSpec, Usage,
};
use crate::imageprep::encode_for_wire;

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    remote_model: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(spec: &ModelSpec) -> Result<Self, GatewayError> {
        let Endpoint::OpenaiCompatible {
            base_url,
            remote_model,
            api_key_env,
        } = &spec.endpoint
        else {
            return Err(GatewayError::InvalidSpec {
                model: spec.name.clone(),
                reason: "not an HTTP endpoint".into(),
            });
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(spec.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            agent,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            remote_model: remote_model.clone().unwrap_or_else(|| spec.name.clone()),
            api_key: std::env::var(api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }
}

/// Request body in the chat-completions wire format.
pub fn request_body(
    remote_model: &str,
    spec: &ModelSpec,
    request: &ChatRequest,
) -> Result<Value, BackendFailure> {
    let mut messages = Vec::new();
    if let Some(system) = &request.system {
        messages.push(json!({"role": "system", "content": system}));
    }
    let user = match &request.image {
        None => json!({"role": "user", "content": request.user}),
        Some(image) => {
            let uri =
                encode_for_wire(image).map_err(|e| BackendFailure::Transport(e.to_string()))?;
            json!({
                "role": "user",
                "content": [
                    {"type": "text", "text": request.user},
                    {"type": "image_url", "image_url": {"url": uri}},
                ],
            })
        }
    };
    messages.push(user);
    Ok(json!({
        "model": remote_model,
        "messages": messages,
        "temperature": spec.temperature,
        "max_tokens": request.max_output_tokens,
    }))
}

/// Extracts completion text and usage from a chat-completions response body.
pub fn parse_response(body: &Value) -> Option<BackendReply> {
    let content = &body["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => return None,
    };
    let usage = body.get("usage").and_then(|u| {
        Some(Usage {
            input_tokens: u["prompt_tokens"].as_u64()?,
            output_tokens: u["completion_tokens"].as_u64()?,
        })
    });
    Some(BackendReply { text, usage })
}

impl Backend for HttpBackend {
    fn send(
        &self,
        spec: &ModelSpec,
        request: &ChatRequest,
        _key: &str,
    ) -> Result<BackendReply, BackendFailure> {
        let body = request_body(&self.remote_model, spec, request)?;
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendFailure::Timeout,
            other => BackendFailure::Transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendFailure::Timeout,
            other => BackendFailure::Transport(other.to_string()),
        })?;
        if !(200..300).contains(&status) {
            return Err(BackendFailure::Http { status, body: text });
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| BackendFailure::Transport(format!("malformed response body: {e}")))?;
        parse_response(&value).ok_or_else(|| {
            BackendFailure::Transport("response has no choices[0].message.content".into())
        })
    }
}
