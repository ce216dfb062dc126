//! Chat-completions backend over blocking HTTP.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{Backend, BackendError, EndpointConfig, GenerationRequest, Part, Role, API_KEY_ENV};

pub struct ChatCompletionsBackend {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl ChatCompletionsBackend {
    /// Credentials come from the environment when present.
    pub fn new(cfg: &EndpointConfig) -> Result<Self, BackendError> {
        Self::with_api_key(cfg, std::env::var(API_KEY_ENV).ok())
    }

    pub fn with_api_key(cfg: &EndpointConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal(format!("http client: {e}")))?;
        Ok(ChatCompletionsBackend { client, api_key })
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "image/png",
    }
}

fn image_url(path: &Path) -> Result<String, BackendError> {
    let bytes = std::fs::read(path).map_err(|e| BackendError::Fatal(format!("reading {}: {e}", path.display())))?;
    Ok(format!("data:{};base64,{}", mime_for(path), base64::engine::general_purpose::STANDARD.encode(bytes)))
}

fn role_str(r: Role) -> &'static str {
    match r {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

/// JSON body for `POST {base_url}/chat/completions`.
pub fn wire_body(req: &GenerationRequest, cfg: &EndpointConfig) -> Result<Value, BackendError> {
    let mut messages = Vec::with_capacity(req.messages.len() + 1);
    for m in &req.messages {
        let content = m
            .parts
            .iter()
            .map(|p| match p {
                Part::Text { text } => Ok(json!({"type": "text", "text": text})),
                Part::Image { path } => Ok(json!({"type": "image_url", "image_url": {"url": image_url(path)?}})),
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        messages.push(json!({"role": role_str(m.role), "content": content}));
    }
    let s = &cfg.sampling;
    let mut body = json!({
        "model": cfg.model_name,
        "messages": messages,
        "temperature": s.temperature,
        "top_p": s.top_p,
        "top_k": s.top_k,
        "repetition_penalty": s.repetition_penalty,
        "presence_penalty": s.presence_penalty,
        "max_tokens": s.max_tokens,
        "n": req.n,
        "seed": s.seed.unwrap_or(req.meta.seed),
        "chat_template_kwargs": {"enable_thinking": req.enable_thinking},
    });
    if let Some(fixed) = &req.fixed_thought {
        // continue a partial assistant turn instead of opening a new one
        body["messages"].as_array_mut().expect("array").push(json!({"role": "assistant", "content": fixed.text}));
        body["continue_final_message"] = json!(true);
        body["add_generation_prompt"] = json!(false);
    }
    Ok(body)
}

/// Completion texts in choice-index order.
pub fn parse_choices(body: &Value) -> Result<Vec<String>, BackendError> {
    let choices = body
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Fatal(format!("response without choices: {body}")))?;
    let mut out: Vec<(u64, String)> = choices
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let idx = c.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
            let text = c.pointer("/message/content").and_then(Value::as_str).unwrap_or_default().to_string();
            (idx, text)
        })
        .collect();
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, t)| t).collect())
}

impl Backend for ChatCompletionsBackend {
    fn generate(&self, req: &GenerationRequest, cfg: &EndpointConfig) -> Result<Vec<String>, BackendError> {
        let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        let mut call = self.client.post(&url).json(&wire_body(req, cfg)?);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Http { status: status.as_u16(), body: text });
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Fatal(format!("malformed response ({e}): {text}")))?;
        parse_choices(&value)
    }
}
