//! Chat-completions / embeddings client over HTTP.
//!
//! Wire shape (see `docs/protocol.md`):
//! `POST {endpoint}/chat/completions` with `model`, `messages`, `temperature`,
//! `max_tokens`, `tools`; the reply carries `choices[0].message` and `usage`.
//! `POST {endpoint}/embeddings` with `model` and `input`; the reply carries
//! `data[].embedding` ordered by `data[].index`.

use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{
    whitespace_tokens, ChatMessage, ChatModel, Completion, CompletionRequest, Embedder,
    EmbeddingVector, GatewayError, Role, TokenCounting, ToolCall, Usage,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(16)))
    }

    fn retryable(status: u16) -> bool {
        status == 429 || (500..600).contains(&status)
    }
}

#[derive(Clone, Debug)]
pub struct HttpSettings {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

pub struct HttpGateway {
    settings: HttpSettings,
    client: Client,
}

impl HttpGateway {
    pub fn new(settings: HttpSettings) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self { settings, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.settings.endpoint.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.url(path);
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.settings.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = match req.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.text().map_err(transport)?;
                    if resp_ok(status) {
                        return serde_json::from_str(&text)
                            .map_err(|e| GatewayError::MalformedResponse(e.to_string()));
                    }
                    GatewayError::Status { status, body: text }
                }
                Err(e) => return Err(transport(e)),
            };
            let retry = matches!(&outcome, GatewayError::Status { status, .. } if RetryPolicy::retryable(*status));
            if !retry || attempt >= self.settings.retry.max_retries {
                return Err(outcome);
            }
            log::warn!("{url}: {outcome}; retrying (attempt {})", attempt + 1);
            thread::sleep(self.settings.retry.delay(attempt));
            attempt += 1;
        }
    }
}

fn resp_ok(status: u16) -> bool {
    (200..300).contains(&status)
}

fn transport(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(e.to_string())
    }
}

fn wire_message(msg: &ChatMessage) -> Value {
    let role = match msg.role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    };
    let mut obj = Map::new();
    obj.insert("role".into(), json!(role));
    obj.insert("content".into(), json!(msg.content));
    if let Some(call) = &msg.tool_call {
        obj.insert(
            "tool_calls".into(),
            json!([{
                "id": call.call_id,
                "type": "function",
                "function": {
                    "name": call.tool_name,
                    "arguments": Value::Object(call.arguments.clone()).to_string(),
                }
            }]),
        );
    }
    if let Some(id) = &msg.tool_call_id {
        obj.insert("tool_call_id".into(), json!(id));
    }
    Value::Object(obj)
}

pub(crate) fn wire_request(request: &CompletionRequest) -> Value {
    let mut body = json!({
        "model": request.model,
        "messages": request.messages.iter().map(wire_message).collect::<Vec<_>>(),
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if !request.tools.is_empty() {
        body["tools"] = request
            .tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {"name": t.name, "description": t.description, "parameters": t.parameters}
                })
            })
            .collect();
    }
    body
}

pub(crate) fn parse_completion(
    body: &Value,
    request: &CompletionRequest,
) -> Result<Completion, GatewayError> {
    let malformed = |m: &str| GatewayError::MalformedResponse(m.to_string());
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| malformed("missing choices[0].message"))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    let tool_call = match message.get("tool_calls").and_then(Value::as_array) {
        Some(calls) if !calls.is_empty() => {
            if calls.len() > 1 {
                log::warn!(
                    "response carried {} tool calls; using the first",
                    calls.len()
                );
            }
            let call = &calls[0];
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("tool call without function.name"))?;
            let arguments = match call.pointer("/function/arguments") {
                Some(Value::String(s)) if s.trim().is_empty() => Map::new(),
                Some(Value::String(s)) => match serde_json::from_str::<Value>(s) {
                    Ok(Value::Object(map)) => map,
                    _ => return Err(malformed("tool call arguments are not a JSON object")),
                },
                Some(Value::Object(map)) => map.clone(),
                _ => Map::new(),
            };
            Some(ToolCall {
                call_id: call
                    .get("id")
                    .and_then(Value::as_str)
                    .unwrap_or("call_0")
                    .to_string(),
                tool_name: name.to_string(),
                arguments,
            })
        }
        _ => None,
    };
    let prompt_tokens = body
        .pointer("/usage/prompt_tokens")
        .and_then(Value::as_u64)
        .unwrap_or_else(|| whitespace_tokens(&request.joined_text()));
    let completion_tokens = body
        .pointer("/usage/completion_tokens")
        .and_then(Value::as_u64)
        .unwrap_or_else(|| whitespace_tokens(&content));
    Ok(Completion {
        message: ChatMessage {
            role: Role::Assistant,
            content,
            tool_call,
            tool_call_id: None,
        },
        usage: Usage {
            prompt_tokens,
            completion_tokens,
        },
    })
}

impl ChatModel for HttpGateway {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let body = self.post("chat/completions", &wire_request(request))?;
        parse_completion(&body, request)
    }

    fn token_counting(&self) -> TokenCounting {
        TokenCounting::GatewayUsage
    }
}

impl Embedder for HttpGateway {
    fn dim(&self) -> usize {
        self.settings.embedding_dim
    }

    fn model(&self) -> &str {
        &self.settings.embedding_model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() || texts.iter().any(|t| t.trim().is_empty()) {
            return Err(GatewayError::InvalidInput(
                "embedding input must be non-empty strings".into(),
            ));
        }
        let body = self.post(
            "embeddings",
            &json!({"model": self.settings.embedding_model, "input": texts}),
        )?;
        let data = body
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::MalformedResponse("missing data array".into()))?;
        if data.len() != texts.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .unwrap_or(pos as u64);
            let values: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::MalformedResponse("missing embedding".into()))?
                .iter()
                .map(|v| v.as_f64().filter(|x| x.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| GatewayError::MalformedResponse("non-numeric embedding".into()))?;
            if values.len() != self.settings.embedding_dim {
                return Err(GatewayError::DimensionMismatch {
                    expected: self.settings.embedding_dim,
                    actual: values.len(),
                });
            }
            rows.push((index, values));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows
            .into_iter()
            .map(|(_, values)| EmbeddingVector {
                values,
                model: self.settings.embedding_model.clone(),
            })
            .collect())
    }
}
