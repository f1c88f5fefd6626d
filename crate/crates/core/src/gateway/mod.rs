//! Model gateway: chat completions and text embeddings behind one contract.
//!
//! Two chat backends exist: [`HttpGateway`] speaks the chat-completions wire
//! shape over HTTP, and [`ScriptedGateway`] replays a declared script for
//! tests and reproducible runs. Embeddings come either from the same HTTP
//! endpoint or from [`HashEmbedder`], a deterministic bag-of-words hasher.

mod embed;
mod http;
mod scripted;
pub mod templates;

pub use embed::HashEmbedder;
pub use http::{HttpGateway, HttpSettings, RetryPolicy};
pub use scripted::{ScriptResponse, ScriptStep, ScriptedGateway};
pub use templates::{render_prompt, render_str, TemplateError};

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// The only tool the recommendation agent may call.
pub const MEMORY_TOOL: &str = "memory_retrieval_tool";

/// Default chat model name.
pub const DEFAULT_CHAT_MODEL: &str = "qwen2.5-3b-instruct";
/// Default embedding model name.
pub const DEFAULT_EMBEDDING_MODEL: &str = "qwen3-embedding-0.6b";
/// Embedding dimensionality of the hashing mock.
pub const DEFAULT_MOCK_DIM: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("gateway returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("script exhausted: call #{call} has no scripted step")]
    ScriptExhausted { call: usize },
    #[error("script step {step}: expected substring {expected:?} not found in request")]
    ScriptMismatch { step: usize, expected: String },
    #[error("failed to load script {path}: {reason}")]
    ScriptLoad { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: String,
    pub tool_name: String,
    pub arguments: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    /// For `Tool` messages: the id of the call being answered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn assistant_tool_call(content: impl Into<String>, call: ToolCall) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
            tool_call: Some(call),
            tool_call_id: None,
        }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
            tool_call: None,
            tool_call_id: Some(call_id.into()),
        }
    }

    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_call: None,
            tool_call_id: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

/// Schema of `memory_retrieval_tool`: either a free-text `query` or a list of `aspects`.
pub fn memory_tool_schema() -> ToolSchema {
    ToolSchema {
        name: MEMORY_TOOL.to_string(),
        description:
            "Retrieve the current user's memories related to the given preference aspects."
                .to_string(),
        parameters: serde_json::json!({
            "type": "object",
            "properties": {
                "aspects": {"type": "array", "items": {"type": "string"}},
                "query": {"type": "string"}
            }
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub tools: Vec<ToolSchema>,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| GatewayError::InvalidRequest("messages must not be empty".into()))?;
        if !matches!(first.role, Role::System | Role::User) {
            return Err(GatewayError::InvalidRequest(
                "first message must be System or User".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        let mut issued: Vec<&str> = Vec::new();
        for msg in &self.messages {
            if let Some(call) = &msg.tool_call {
                issued.push(&call.call_id);
            }
            if msg.role == Role::Tool {
                let id = msg.tool_call_id.as_deref().unwrap_or("");
                if !issued.contains(&id) {
                    return Err(GatewayError::InvalidRequest(format!(
                        "tool message references unknown call id {id:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// All message text, newline-joined. Used for script matching and token counts.
    pub fn joined_text(&self) -> String {
        let mut out = String::new();
        for msg in &self.messages {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&msg.content);
            if let Some(call) = &msg.tool_call {
                out.push('\n');
                out.push_str(&render_tool_call(call));
            }
        }
        out
    }
}

/// `name {json arguments}`; the textual form of a call in traces and token counts.
pub fn render_tool_call(call: &ToolCall) -> String {
    format!(
        "{} {}",
        call.tool_name,
        Value::Object(call.arguments.clone())
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl Add for Usage {
    type Output = Usage;
    fn add(self, rhs: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), Add::add)
    }
}

/// Whitespace-delimited token count; the mock's stand-in for a tokenizer.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub message: ChatMessage,
    pub usage: Usage,
}

/// How usage counters were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCounting {
    Whitespace,
    GatewayUsage,
}

pub trait ChatModel: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError>;

    fn token_counting(&self) -> TokenCounting;

    /// True when calls must be issued one at a time in a fixed order.
    fn is_sequential(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model: String,
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn model(&self) -> &str;

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
}

/// Sampling settings shared by every prompt a component issues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self {
            model: DEFAULT_CHAT_MODEL.to_string(),
            temperature: 1.0,
            max_tokens: 768,
        }
    }
}

/// A chat model paired with its sampling settings.
#[derive(Clone, Copy)]
pub struct Llm<'a> {
    pub chat: &'a dyn ChatModel,
    pub settings: &'a ChatSettings,
}

impl<'a> Llm<'a> {
    pub fn new(chat: &'a dyn ChatModel, settings: &'a ChatSettings) -> Self {
        Self { chat, settings }
    }

    pub fn request(&self, messages: Vec<ChatMessage>, tools: Vec<ToolSchema>) -> CompletionRequest {
        CompletionRequest {
            model: self.settings.model.clone(),
            messages,
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
            tools,
        }
    }

    /// Single-turn prompt; returns the assistant text and usage.
    pub fn ask(&self, prompt: &str) -> Result<(String, Usage), GatewayError> {
        let request = self.request(vec![ChatMessage::user(prompt)], Vec::new());
        let completion = self.chat.complete(&request)?;
        Ok((completion.message.content, completion.usage))
    }
}

/// Counts calls and usage passing through an inner chat model.
pub struct MeteredChat<'a> {
    inner: &'a dyn ChatModel,
    tally: std::sync::Mutex<(usize, Usage)>,
}

impl<'a> MeteredChat<'a> {
    pub fn new(inner: &'a dyn ChatModel) -> Self {
        Self {
            inner,
            tally: std::sync::Mutex::new((0, Usage::default())),
        }
    }

    pub fn calls(&self) -> usize {
        self.tally.lock().unwrap().0
    }

    pub fn usage(&self) -> Usage {
        self.tally.lock().unwrap().1
    }
}

impl ChatModel for MeteredChat<'_> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        let result = self.inner.complete(request);
        let mut tally = self.tally.lock().unwrap();
        tally.0 += 1;
        if let Ok(c) = &result {
            tally.1 += c.usage;
        }
        result
    }

    fn token_counting(&self) -> TokenCounting {
        self.inner.token_counting()
    }

    fn is_sequential(&self) -> bool {
        self.inner.is_sequential()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let mut req = CompletionRequest {
            model: "m".into(),
            messages: vec![],
            temperature: 1.0,
            max_tokens: 10,
            tools: vec![],
        };
        assert!(req.validate().is_err());
        req.messages.push(ChatMessage::assistant("hi"));
        assert!(req.validate().is_err());
        req.messages[0] = ChatMessage::user("hi");
        req.validate().unwrap();
        req.messages.push(ChatMessage::tool("call_9", "x"));
        assert!(req.validate().is_err());
        let call = ToolCall {
            call_id: "call_9".into(),
            tool_name: MEMORY_TOOL.into(),
            arguments: Map::new(),
        };
        req.messages
            .insert(1, ChatMessage::assistant_tool_call("", call));
        req.validate().unwrap();
    }

    #[test]
    fn usage_is_additive() {
        let a = Usage {
            prompt_tokens: 3,
            completion_tokens: 1,
        };
        let b = Usage {
            prompt_tokens: 4,
            completion_tokens: 2,
        };
        let total: Usage = [a, b].into_iter().sum();
        assert_eq!(
            total,
            Usage {
                prompt_tokens: 7,
                completion_tokens: 3
            }
        );
        assert_eq!(total.total(), 10);
    }
}
