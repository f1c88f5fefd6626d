use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{
    render_tool_call, whitespace_tokens, ChatMessage, ChatModel, Completion, CompletionRequest,
    GatewayError, TokenCounting, ToolCall, Usage,
};

/// One scripted reply. Serialized as `{"text": ..}`, `{"tool_call": ..}` or `{"error": ..}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptResponse {
    Text(String),
    ToolCall {
        name: String,
        #[serde(default)]
        arguments: Map<String, Value>,
    },
    Error {
        status: u16,
        body: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    /// When set, the request text must contain this substring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_substring: Option<String>,
    pub respond: ScriptResponse,
}

impl ScriptStep {
    pub fn text(expect: Option<&str>, text: impl Into<String>) -> Self {
        Self {
            expect_substring: expect.map(str::to_string),
            respond: ScriptResponse::Text(text.into()),
        }
    }

    pub fn tool_call(expect: Option<&str>, name: &str, arguments: Value) -> Self {
        let arguments = match arguments {
            Value::Object(map) => map,
            _ => Map::new(),
        };
        Self {
            expect_substring: expect.map(str::to_string),
            respond: ScriptResponse::ToolCall {
                name: name.to_string(),
                arguments,
            },
        }
    }

    pub fn error(expect: Option<&str>, status: u16, body: impl Into<String>) -> Self {
        Self {
            expect_substring: expect.map(str::to_string),
            respond: ScriptResponse::Error {
                status,
                body: body.into(),
            },
        }
    }
}

#[derive(Default)]
struct ScriptState {
    next: usize,
    history: Vec<CompletionRequest>,
}

/// Replays a fixed sequence of steps. Any call past the end of the script fails.
pub struct ScriptedGateway {
    steps: Vec<ScriptStep>,
    state: Mutex<ScriptState>,
}

impl ScriptedGateway {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Self {
            steps,
            state: Mutex::new(ScriptState::default()),
        }
    }

    /// Loads a JSON array of steps.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let load_err = |reason: String| GatewayError::ScriptLoad {
            path: path.display().to_string(),
            reason,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let steps: Vec<ScriptStep> =
            serde_json::from_str(&raw).map_err(|e| load_err(e.to_string()))?;
        Ok(Self::new(steps))
    }

    pub fn steps(&self) -> &[ScriptStep] {
        &self.steps
    }

    pub fn calls_made(&self) -> usize {
        self.state.lock().unwrap().next
    }

    pub fn remaining(&self) -> usize {
        self.steps.len() - self.calls_made()
    }

    /// Every request received so far, in order.
    pub fn history(&self) -> Vec<CompletionRequest> {
        self.state.lock().unwrap().history.clone()
    }
}

impl ChatModel for ScriptedGateway {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let mut state = self.state.lock().unwrap();
        let index = state.next;
        let step = self
            .steps
            .get(index)
            .ok_or(GatewayError::ScriptExhausted { call: index + 1 })?;
        state.next += 1;
        state.history.push(request.clone());
        drop(state);

        let joined = request.joined_text();
        if let Some(expected) = &step.expect_substring {
            if !joined.contains(expected.as_str()) {
                return Err(GatewayError::ScriptMismatch {
                    step: index + 1,
                    expected: expected.clone(),
                });
            }
        }
        let prompt_tokens = whitespace_tokens(&joined);
        let message = match &step.respond {
            ScriptResponse::Text(text) => ChatMessage::assistant(text.clone()),
            ScriptResponse::ToolCall { name, arguments } => ChatMessage::assistant_tool_call(
                "",
                ToolCall {
                    call_id: format!("call_{}", index + 1),
                    tool_name: name.clone(),
                    arguments: arguments.clone(),
                },
            ),
            ScriptResponse::Error { status, body } => {
                return Err(GatewayError::Status {
                    status: *status,
                    body: body.clone(),
                })
            }
        };
        let completion_tokens = match &message.tool_call {
            Some(call) => whitespace_tokens(&render_tool_call(call)),
            None => whitespace_tokens(&message.content),
        };
        Ok(Completion {
            message,
            usage: Usage {
                prompt_tokens,
                completion_tokens,
            },
        })
    }

    fn token_counting(&self) -> TokenCounting {
        TokenCounting::Whitespace
    }

    fn is_sequential(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatSettings, Llm, MEMORY_TOOL};
    use serde_json::json;

    fn req(text: &str) -> CompletionRequest {
        CompletionRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user(text)],
            temperature: 1.0,
            max_tokens: 16,
            tools: vec![],
        }
    }

    #[test]
    fn replays_text_and_counts_tokens() {
        let gw = ScriptedGateway::new(vec![ScriptStep::text(None, "X")]);
        let out = gw.complete(&req("say X please")).unwrap();
        assert_eq!(out.message.content, "X");
        assert!(out.message.tool_call.is_none());
        assert_eq!(
            out.usage,
            Usage {
                prompt_tokens: 3,
                completion_tokens: 1
            }
        );
    }

    #[test]
    fn replays_tool_call() {
        let gw = ScriptedGateway::new(vec![ScriptStep::tool_call(
            None,
            MEMORY_TOOL,
            json!({"query": "leather"}),
        )]);
        let out = gw.complete(&req("go")).unwrap();
        let call = out.message.tool_call.unwrap();
        assert_eq!(call.tool_name, MEMORY_TOOL);
        assert_eq!(call.arguments.get("query"), Some(&json!("leather")));
        assert_eq!(call.call_id, "call_1");
    }

    #[test]
    fn over_call_fails() {
        let gw = ScriptedGateway::new(vec![ScriptStep::text(None, "only")]);
        gw.complete(&req("a")).unwrap();
        assert!(matches!(
            gw.complete(&req("b")),
            Err(GatewayError::ScriptExhausted { call: 2 })
        ));
        assert_eq!(gw.remaining(), 0);
    }

    #[test]
    fn expectation_mismatch_fails() {
        let gw = ScriptedGateway::new(vec![ScriptStep::text(Some("Category: Clothing"), "x")]);
        assert!(matches!(
            gw.complete(&req("Category: Electronics")),
            Err(GatewayError::ScriptMismatch { step: 1, .. })
        ));
    }

    #[test]
    fn scripted_error_status() {
        let gw = ScriptedGateway::new(vec![ScriptStep::error(None, 500, "boom")]);
        match gw.complete(&req("a")) {
            Err(GatewayError::Status { status, body }) => {
                assert_eq!(status, 500);
                assert_eq!(body, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn script_file_round_trip() {
        let steps = vec![
            ScriptStep::text(Some("hi"), "there"),
            ScriptStep::tool_call(None, MEMORY_TOOL, json!({"aspects": ["Fit"]})),
            ScriptStep::error(None, 429, "slow down"),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, serde_json::to_string_pretty(&steps).unwrap()).unwrap();
        let gw = ScriptedGateway::from_file(&path).unwrap();
        assert_eq!(gw.steps(), steps.as_slice());
        let settings = ChatSettings::default();
        let (text, _) = Llm::new(&gw, &settings).ask("hi").unwrap();
        assert_eq!(text, "there");
    }
}
