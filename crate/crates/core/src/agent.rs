//! One recommendation episode: global-memory hints, a bounded tool loop over
//! the user's local memory, and item retrieval from the boxed ideal profile.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::QueryRecord;
use crate::gateway::{
    memory_tool_schema, render_prompt, render_tool_call, templates, ChatMessage, GatewayError, Llm,
    TokenCounting, ToolCall, Usage, MEMORY_TOOL,
};
use crate::memory::{MemoryEntry, MemoryScope, MemoryStore, MemoryTier};
use crate::retriever::{
    index_docs, search_items, search_memory, CatalogIndex, RetrievalError, Retriever,
};
use crate::reward::RankedList;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("no \\boxed{{...}} answer found")]
    NoBoxFound,
    #[error("malformed boxed answer: {0}")]
    MalformedBox(String),
    #[error("bad tool call: {0}")]
    BadToolArguments(String),
    #[error("no final answer within {0} turns")]
    TurnLimitExceeded(usize),
    #[error("max_turns must be at least 1")]
    ZeroTurns,
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
}

impl AgentError {
    pub fn is_gateway(&self) -> bool {
        matches!(
            self,
            AgentError::Gateway(_) | AgentError::Retrieval(RetrievalError::Embedding(_))
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxedAnswer {
    pub ideal_item_profile: String,
    #[serde(default)]
    pub useful_memory_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Prompt,
    AssistantText,
    ToolCallIssued,
    ToolResult,
    FinalAnswer,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnEvent {
    pub kind: EventKind,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    /// Usage of the gateway call that produced this event; zero for inputs.
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injected_entry_ids: Vec<String>,
}

impl TurnEvent {
    fn new(kind: EventKind, payload: impl Into<String>) -> Self {
        Self {
            kind,
            payload: payload.into(),
            tool_name: None,
            usage: Usage::default(),
            injected_entry_ids: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub query_id: String,
    pub user_id: String,
    pub global_hint_ids: Vec<String>,
    pub events: Vec<TurnEvent>,
    pub retrieved_entry_ids: BTreeSet<String>,
    pub memory_tool_called: bool,
    pub final_text: Option<String>,
    #[serde(rename = "final")]
    pub final_answer: Option<BoxedAnswer>,
    /// `useful_memory_ids` that were never injected during the episode.
    pub unknown_useful_ids: Vec<String>,
    pub usage: Usage,
    pub token_counting: TokenCounting,
    pub error: Option<String>,
}

impl ReasoningTrace {
    pub fn new(query: &QueryRecord, token_counting: TokenCounting) -> Self {
        Self {
            query_id: query.query_id.clone(),
            user_id: query.user_id.clone(),
            global_hint_ids: Vec::new(),
            events: Vec::new(),
            retrieved_entry_ids: BTreeSet::new(),
            memory_tool_called: false,
            final_text: None,
            final_answer: None,
            unknown_useful_ids: Vec::new(),
            usage: Usage::default(),
            token_counting,
            error: None,
        }
    }

    /// Prompt-side tokens of every event that carried retrieved memory.
    pub fn memory_tokens(&self) -> u64 {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::ToolResult)
            .map(|e| crate::gateway::whitespace_tokens(&e.payload))
            .sum()
    }
}

/// Character range `[start, end)` (in bytes) inside a serialized episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// Event payloads joined by newlines, with the spans occupied by tool results.
pub fn serialize_episode(trace: &ReasoningTrace) -> (String, Vec<Span>) {
    let mut text = String::new();
    let mut spans = Vec::new();
    for (i, event) in trace.events.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let start = text.len();
        text.push_str(&event.payload);
        if event.kind == EventKind::ToolResult {
            spans.push(Span {
                start,
                end: text.len(),
            });
        }
    }
    (text, spans)
}

/// Byte offset just past the closing brace matching the `{` at `open`.
/// Braces inside JSON string literals are ignored.
fn matching_brace(text: &str, open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in text[open..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(open + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_object(text: &str) -> Option<Map<String, Value>> {
    let value: Value = serde_json::from_str(text)
        .or_else(|_| json5::from_str(text))
        .ok()?;
    match value {
        Value::Object(map) => Some(map),
        _ => None,
    }
}

/// Parses the last balanced `\boxed{...}` span in `text`.
///
/// The interior may be a bare key list (`"k": v, ...`) or a full JSON object.
pub fn parse_boxed_answer(text: &str) -> Result<BoxedAnswer, AgentError> {
    const MARKER: &str = "\\boxed{";
    let starts: Vec<usize> = text.match_indices(MARKER).map(|(i, _)| i).collect();
    if starts.is_empty() {
        return Err(AgentError::NoBoxFound);
    }
    let (open, close) = starts
        .iter()
        .rev()
        .find_map(|&s| {
            let open = s + MARKER.len() - 1;
            matching_brace(text, open).map(|close| (open, close))
        })
        .ok_or_else(|| AgentError::MalformedBox("unbalanced braces".into()))?;
    let interior = text[open + 1..close - 1].trim();
    let object_text = if interior.starts_with('{') {
        interior.to_string()
    } else {
        format!("{{{interior}}}")
    };
    let map = parse_object(&object_text)
        .ok_or_else(|| AgentError::MalformedBox("interior is not a JSON object".into()))?;
    let profile = match map.get("ideal_item_profile") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(Value::String(_)) => {
            return Err(AgentError::MalformedBox(
                "ideal_item_profile is empty".into(),
            ))
        }
        Some(_) => {
            return Err(AgentError::MalformedBox(
                "ideal_item_profile is not a string".into(),
            ))
        }
        None => {
            return Err(AgentError::MalformedBox(
                "missing ideal_item_profile".into(),
            ))
        }
    };
    let useful = match map.get("useful_memory_ids") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                other => Err(AgentError::MalformedBox(format!(
                    "useful_memory_ids entry {other} is not a string"
                ))),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => {
            return Err(AgentError::MalformedBox(
                "useful_memory_ids is not a list".into(),
            ))
        }
    };
    Ok(BoxedAnswer {
        ideal_item_profile: profile,
        useful_memory_ids: useful,
    })
}

/// Recognizes a tool call written into plain text as `<tool_call>{"name": .., "arguments": ..}</tool_call>`.
pub fn text_tool_call(text: &str, call_id: &str) -> Option<ToolCall> {
    let start = text.find("<tool_call>")? + "<tool_call>".len();
    let end = start + text[start..].find("</tool_call>")?;
    let map = parse_object(text[start..end].trim())?;
    let name = map.get("name")?.as_str()?.to_string();
    let arguments = match map.get("arguments") {
        Some(Value::Object(args)) => args.clone(),
        Some(Value::String(s)) => parse_object(s)?,
        None => Map::new(),
        Some(_) => return None,
    };
    Some(ToolCall {
        call_id: call_id.to_string(),
        tool_name: name,
        arguments,
    })
}

pub const DEFAULT_K_HINTS: usize = 3;

/// Top-k global aspects for the query, restricted to `scenario` when given.
pub fn retrieve_global_hints(
    query_text: &str,
    scenario: Option<&str>,
    store: &MemoryStore,
    k: usize,
    retriever: &Retriever<'_>,
) -> Result<Vec<MemoryEntry>, RetrievalError> {
    let candidates: Vec<&MemoryEntry> = store
        .scan(
            &MemoryScope::Global,
            Some(MemoryTier::GlobalAspect),
            scenario,
        )
        .into_iter()
        .collect();
    if candidates.is_empty() {
        log::warn!("no global memory for scenario {scenario:?}");
        return Ok(Vec::new());
    }
    let index = retriever.build(index_docs(candidates))?;
    Ok(retriever
        .search(&index, query_text, k)?
        .into_iter()
        .filter_map(|h| store.get(&h.doc_id).cloned())
        .collect())
}

pub fn render_hints(hints: &[MemoryEntry]) -> String {
    if hints.is_empty() {
        return String::new();
    }
    let lines: Vec<String> = hints.iter().map(|h| format!("- {}", h.text)).collect();
    format!(
        "Aspects other users considered in this scenario:\n{}",
        lines.join("\n")
    )
}

pub const NO_RESULTS: &str = "NO_RESULTS";

#[derive(Clone, Debug, PartialEq)]
pub struct ToolOutcome {
    pub message: ChatMessage,
    pub injected_entry_ids: Vec<String>,
}

fn tool_aspects(call: &ToolCall) -> Result<Vec<String>, AgentError> {
    if call.tool_name != MEMORY_TOOL {
        return Err(AgentError::BadToolArguments(format!(
            "unknown tool {:?}",
            call.tool_name
        )));
    }
    let aspects: Vec<String> = match (call.arguments.get("aspects"), call.arguments.get("query")) {
        (Some(Value::Array(items)), _) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| AgentError::BadToolArguments("aspects must be strings".into()))
            })
            .collect::<Result<_, _>>()?,
        (Some(Value::String(s)), _) | (None, Some(Value::String(s))) => vec![s.clone()],
        (Some(_), _) => {
            return Err(AgentError::BadToolArguments(
                "aspects must be a list".into(),
            ))
        }
        _ => {
            return Err(AgentError::BadToolArguments(
                "expected \"aspects\" or \"query\"".into(),
            ))
        }
    };
    let aspects: Vec<String> = aspects
        .into_iter()
        .map(|a| a.trim().to_string())
        .filter(|a| !a.is_empty())
        .collect();
    if aspects.is_empty() {
        return Err(AgentError::BadToolArguments("no non-empty aspect".into()));
    }
    Ok(aspects)
}

/// Runs a memory tool call against the user's local memory.
pub fn handle_tool_call(
    call: &ToolCall,
    store: &MemoryStore,
    user_id: &str,
    k_mem: usize,
    retriever: &Retriever<'_>,
) -> Result<ToolOutcome, AgentError> {
    let aspects = tool_aspects(call)?;
    let hits = search_memory(store, user_id, &aspects, k_mem, retriever)?;
    if hits.is_empty() {
        return Ok(ToolOutcome {
            message: ChatMessage::tool(&call.call_id, NO_RESULTS),
            injected_entry_ids: Vec::new(),
        });
    }
    let mut lines = Vec::with_capacity(hits.len());
    let mut ids = Vec::with_capacity(hits.len());
    for (n, h) in hits.iter().enumerate() {
        let entry = store
            .get(&h.hit.doc_id)
            .expect("hit refers to a stored entry");
        lines.push(format!("{}. [{}] {}", n + 1, entry.entry_id, entry.text));
        ids.push(entry.entry_id.clone());
    }
    Ok(ToolOutcome {
        message: ChatMessage::tool(&call.call_id, lines.join("\n")),
        injected_entry_ids: ids,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendLimits {
    pub max_turns: usize,
    pub k_mem: usize,
    pub k_items: usize,
    pub k_hints: usize,
}

impl Default for RecommendLimits {
    fn default() -> Self {
        Self {
            max_turns: 4,
            k_mem: crate::retriever::DEFAULT_K_PER_ASPECT,
            k_items: crate::retriever::DEFAULT_K_ITEMS,
            k_hints: DEFAULT_K_HINTS,
        }
    }
}

/// Read-only state shared by all episodes of a run.
#[derive(Clone, Copy)]
pub struct AgentContext<'a> {
    pub store: &'a MemoryStore,
    pub llm: Llm<'a>,
    pub retriever: Retriever<'a>,
    pub catalog_index: &'a CatalogIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub trace: ReasoningTrace,
    pub ranked: RankedList,
}

#[derive(Debug)]
pub struct EpisodeFailure {
    pub trace: ReasoningTrace,
    pub error: AgentError,
}

/// User message appended after assistant text that neither calls the tool nor answers.
pub const CONTINUE_PROMPT: &str = "Continue. Finish with the boxed answer.";

/// Runs one episode. A failure carries the partial trace along with the error.
#[allow(clippy::result_large_err)]
pub fn recommend(
    query: &QueryRecord,
    ctx: &AgentContext<'_>,
    limits: &RecommendLimits,
) -> Result<Episode, EpisodeFailure> {
    let mut trace = ReasoningTrace::new(query, ctx.llm.chat.token_counting());
    match run_episode(query, ctx, limits, &mut trace) {
        Ok(ranked) => Ok(Episode { trace, ranked }),
        Err(error) => {
            trace.error = Some(error.to_string());
            Err(EpisodeFailure { trace, error })
        }
    }
}

fn run_episode(
    query: &QueryRecord,
    ctx: &AgentContext<'_>,
    limits: &RecommendLimits,
    trace: &mut ReasoningTrace,
) -> Result<RankedList, AgentError> {
    if limits.max_turns == 0 {
        return Err(AgentError::ZeroTurns);
    }
    let hints = retrieve_global_hints(
        &query.query_text,
        Some(&query.scenario),
        ctx.store,
        limits.k_hints,
        &ctx.retriever,
    )?;
    trace.global_hint_ids = hints.iter().map(|h| h.entry_id.clone()).collect();
    let prompt = render_prompt(
        templates::RECOMMENDATION,
        &[
            (
                "Retrieved Cross-User Global Memory Based on Query",
                &render_hints(&hints),
            ),
            ("query", &query.query_text),
        ],
    )
    .expect("recommendation template binds");
    trace
        .events
        .push(TurnEvent::new(EventKind::Prompt, prompt.clone()));
    let mut messages = vec![ChatMessage::user(prompt)];

    let mut answer = None;
    for turn in 0..limits.max_turns {
        let request = ctx
            .llm
            .request(messages.clone(), vec![memory_tool_schema()]);
        let completion = match ctx.llm.chat.complete(&request) {
            Ok(c) => c,
            Err(e) => {
                trace
                    .events
                    .push(TurnEvent::new(EventKind::Error, e.to_string()));
                return Err(e.into());
            }
        };
        trace.usage += completion.usage;
        let reply = completion.message;
        let call = reply
            .tool_call
            .clone()
            .or_else(|| text_tool_call(&reply.content, &format!("text_call_{turn}")));

        if let Some(call) = call {
            let mut issued = TurnEvent::new(EventKind::ToolCallIssued, render_tool_call(&call));
            issued.tool_name = Some(call.tool_name.clone());
            issued.usage = completion.usage;
            trace.events.push(issued);
            if call.tool_name == MEMORY_TOOL {
                trace.memory_tool_called = true;
            }
            let outcome = match handle_tool_call(
                &call,
                ctx.store,
                &query.user_id,
                limits.k_mem,
                &ctx.retriever,
            ) {
                Ok(o) => o,
                Err(AgentError::BadToolArguments(reason)) => ToolOutcome {
                    message: ChatMessage::tool(&call.call_id, format!("ERROR: {reason}")),
                    injected_entry_ids: Vec::new(),
                },
                Err(e) => return Err(e),
            };
            let mut result = TurnEvent::new(EventKind::ToolResult, outcome.message.content.clone());
            result.injected_entry_ids = outcome.injected_entry_ids.clone();
            trace.retrieved_entry_ids.extend(outcome.injected_entry_ids);
            trace.events.push(result);
            messages.push(ChatMessage::assistant_tool_call(reply.content, call));
            messages.push(outcome.message);
            continue;
        }

        if reply.content.contains("\\boxed{") {
            let mut fin = TurnEvent::new(EventKind::FinalAnswer, reply.content.clone());
            fin.usage = completion.usage;
            trace.events.push(fin);
            trace.final_text = Some(reply.content.clone());
            answer = Some(parse_boxed_answer(&reply.content)?);
            break;
        }

        let mut text = TurnEvent::new(EventKind::AssistantText, reply.content.clone());
        text.usage = completion.usage;
        trace.events.push(text);
        if turn + 1 < limits.max_turns {
            messages.push(ChatMessage::assistant(reply.content));
            messages.push(ChatMessage::user(CONTINUE_PROMPT));
            trace
                .events
                .push(TurnEvent::new(EventKind::Prompt, CONTINUE_PROMPT));
        }
    }

    let answer = answer.ok_or(AgentError::TurnLimitExceeded(limits.max_turns))?;
    trace.unknown_useful_ids = answer
        .useful_memory_ids
        .iter()
        .filter(|id| !trace.retrieved_entry_ids.contains(*id))
        .cloned()
        .collect();
    let profile = answer.ideal_item_profile.clone();
    trace.final_answer = Some(answer);
    let items = search_items(ctx.catalog_index, &profile, limits.k_items, &ctx.retriever)?;
    Ok(
        RankedList::new(&query.query_id, items, &query.ground_truth_item_id)
            .expect("search returns distinct ids"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Catalog, ItemDoc};
    use crate::gateway::{ChatSettings, HashEmbedder, ScriptStep, ScriptedGateway};
    use crate::retriever::RetrievalBackend;
    use serde_json::json;

    #[test]
    fn boxed_schema_parses() {
        let a = parse_boxed_answer(r#"thinking... \boxed{"ideal_item_profile": "leather adjustable cap", "useful_memory_ids": ["m1"]}"#).unwrap();
        assert_eq!(a.ideal_item_profile, "leather adjustable cap");
        assert_eq!(a.useful_memory_ids, vec!["m1"]);
    }

    #[test]
    fn boxed_variants() {
        assert!(matches!(
            parse_boxed_answer("no box here"),
            Err(AgentError::NoBoxFound)
        ));
        assert!(matches!(
            parse_boxed_answer(r#"\boxed{"wrong_key": 1}"#),
            Err(AgentError::MalformedBox(_))
        ));
        assert!(matches!(
            parse_boxed_answer(r#"\boxed{"ideal_item_profile": "x""#),
            Err(AgentError::MalformedBox(_))
        ));
        assert!(matches!(
            parse_boxed_answer(r#"\boxed{"ideal_item_profile": ""}"#),
            Err(AgentError::MalformedBox(_))
        ));
        let wrapped =
            parse_boxed_answer(r#"\boxed{{"ideal_item_profile": "a {braced} hat"}}"#).unwrap();
        assert_eq!(wrapped.ideal_item_profile, "a {braced} hat");
        assert!(wrapped.useful_memory_ids.is_empty());
        let last = parse_boxed_answer(
            r#"\boxed{"ideal_item_profile": "first"} then \boxed{"ideal_item_profile": "second",}"#,
        )
        .unwrap();
        assert_eq!(last.ideal_item_profile, "second");
    }

    #[test]
    fn text_tool_call_fallback() {
        let call = text_tool_call(
            r#"<tool_call>{"name": "memory_retrieval_tool", "arguments": {"aspects": ["fit"]}}</tool_call>"#,
            "c",
        )
        .unwrap();
        assert_eq!(call.tool_name, MEMORY_TOOL);
        assert_eq!(call.arguments["aspects"], json!(["fit"]));
        assert!(text_tool_call("plain text", "c").is_none());
    }

    fn store() -> MemoryStore {
        let mut s = MemoryStore::new(32);
        s.put_entries([
            MemoryEntry::new(
                MemoryTier::PreferencePattern,
                MemoryScope::user("u1"),
                Some("Clothing".into()),
                "prefers real leather caps",
                vec![],
            )
            .unwrap(),
            MemoryEntry::new(
                MemoryTier::GlobalAspect,
                MemoryScope::Global,
                Some("Clothing".into()),
                "Fit and Comfort: adjustable straps",
                vec![],
            )
            .unwrap(),
            MemoryEntry::new(
                MemoryTier::GlobalAspect,
                MemoryScope::Global,
                Some("Electronics".into()),
                "Battery Life: long lasting",
                vec![],
            )
            .unwrap(),
        ])
        .unwrap();
        s
    }

    fn call(args: Value) -> ToolCall {
        ToolCall {
            call_id: "c1".into(),
            tool_name: MEMORY_TOOL.into(),
            arguments: args.as_object().unwrap().clone(),
        }
    }

    #[test]
    fn tool_call_handling() {
        let e = HashEmbedder::new(32, 3);
        let r = Retriever::new(RetrievalBackend::Bm25, &e);
        let s = store();
        let out =
            handle_tool_call(&call(json!({"aspects": ["material"]})), &s, "u1", 3, &r).unwrap();
        assert!(out.message.content.starts_with("1. ["));
        assert!(out.message.content.contains("real leather"));
        assert_eq!(out.injected_entry_ids.len(), 1);
        let bare = handle_tool_call(&call(json!({"query": "leather"})), &s, "u1", 3, &r).unwrap();
        assert_eq!(bare.injected_entry_ids, out.injected_entry_ids);
        let none = handle_tool_call(&call(json!({"query": "leather"})), &s, "u9", 3, &r).unwrap();
        assert_eq!(none.message.content, NO_RESULTS);
        assert!(none.injected_entry_ids.is_empty());
        let mut wrong = call(json!({"query": "x"}));
        wrong.tool_name = "web_search".into();
        assert!(matches!(
            handle_tool_call(&wrong, &s, "u1", 3, &r),
            Err(AgentError::BadToolArguments(_))
        ));
        assert!(matches!(
            handle_tool_call(&call(json!({"k": 1})), &s, "u1", 3, &r),
            Err(AgentError::BadToolArguments(_))
        ));
    }

    #[test]
    fn hints_filter_by_scenario() {
        let e = HashEmbedder::new(32, 3);
        let r = Retriever::new(RetrievalBackend::Bm25, &e);
        let s = store();
        let hints = retrieve_global_hints("cap", Some("Clothing"), &s, 3, &r).unwrap();
        assert_eq!(hints.len(), 1);
        assert!(hints[0].text.starts_with("Fit and Comfort"));
        assert_eq!(
            retrieve_global_hints("cap", None, &s, 3, &r).unwrap().len(),
            2
        );
        assert!(
            retrieve_global_hints("cap", None, &MemoryStore::new(32), 3, &r)
                .unwrap()
                .is_empty()
        );
    }

    fn query() -> QueryRecord {
        QueryRecord {
            query_id: "q1".into(),
            user_id: "u1".into(),
            query_text: "a cap for spring".into(),
            ground_truth_item_id: "i1".into(),
            scenario: "Clothing".into(),
        }
    }

    fn run(
        steps: Vec<ScriptStep>,
        max_turns: usize,
    ) -> (Result<Episode, EpisodeFailure>, usize, Usage) {
        let e = HashEmbedder::new(32, 3);
        let r = Retriever::new(RetrievalBackend::Bm25, &e);
        let s = store();
        let cat = Catalog::from_items(vec![
            ItemDoc {
                item_id: "i1".into(),
                title: "Leather cap".into(),
                category: "Clothing".into(),
                metadata_text: "leather adjustable cap".into(),
            },
            ItemDoc {
                item_id: "i2".into(),
                title: "Cable".into(),
                category: "Electronics".into(),
                metadata_text: "usb cable".into(),
            },
        ])
        .unwrap();
        let idx = CatalogIndex::build(&cat, &r).unwrap();
        let gw = ScriptedGateway::new(steps);
        let settings = ChatSettings::default();
        let ctx = AgentContext {
            store: &s,
            llm: Llm::new(&gw, &settings),
            retriever: r,
            catalog_index: &idx,
        };
        let limits = RecommendLimits {
            max_turns,
            ..Default::default()
        };
        let out = recommend(&query(), &ctx, &limits);
        let summed = gw.history().len();
        let usage: Usage = gw
            .history()
            .iter()
            .map(|req| Usage {
                prompt_tokens: crate::gateway::whitespace_tokens(&req.joined_text()),
                completion_tokens: 0,
            })
            .sum();
        (out, summed, usage)
    }

    const ANSWER: &str =
        r#"\boxed{"ideal_item_profile": "leather adjustable cap", "useful_memory_ids": ["nope"]}"#;

    #[test]
    fn three_step_episode() {
        let (out, calls, usage) = run(
            vec![
                ScriptStep::tool_call(
                    Some("User query: a cap for spring"),
                    MEMORY_TOOL,
                    json!({"aspects": ["leather"]}),
                ),
                ScriptStep::text(Some("real leather"), ANSWER),
            ],
            4,
        );
        let ep = out.unwrap();
        assert!(ep.trace.memory_tool_called);
        assert_eq!(ep.ranked.item_ids[0], "i1");
        assert_eq!(ep.trace.unknown_useful_ids, vec!["nope"]);
        assert_eq!(calls, 2);
        assert_eq!(ep.trace.usage.prompt_tokens, usage.prompt_tokens);
        let kinds: Vec<EventKind> = ep.trace.events.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                EventKind::Prompt,
                EventKind::ToolCallIssued,
                EventKind::ToolResult,
                EventKind::FinalAnswer
            ]
        );
        let injected: BTreeSet<String> = ep
            .trace
            .events
            .iter()
            .flat_map(|e| e.injected_entry_ids.clone())
            .collect();
        assert_eq!(injected, ep.trace.retrieved_entry_ids);
        assert_eq!(
            ep.trace.usage,
            ep.trace.events.iter().map(|e| e.usage).sum()
        );
    }

    #[test]
    fn immediate_answer_has_no_tool_call() {
        let (out, _, _) = run(vec![ScriptStep::text(None, ANSWER)], 4);
        assert!(!out.unwrap().trace.memory_tool_called);
    }

    #[test]
    fn turn_limit() {
        let (out, calls, _) = run(
            vec![
                ScriptStep::text(None, "hmm"),
                ScriptStep::text(Some(CONTINUE_PROMPT), "still thinking"),
            ],
            2,
        );
        let fail = out.unwrap_err();
        assert!(matches!(fail.error, AgentError::TurnLimitExceeded(2)));
        assert!(fail.trace.final_answer.is_none());
        assert_eq!(calls, 2);
    }

    #[test]
    fn gateway_error_is_recorded() {
        let (out, _, _) = run(vec![ScriptStep::error(None, 500, "boom")], 3);
        let fail = out.unwrap_err();
        assert!(fail.error.is_gateway());
        assert_eq!(fail.trace.events.last().unwrap().kind, EventKind::Error);
    }

    #[test]
    fn injected_spans_cover_tool_results_only() {
        let (out, _, _) = run(
            vec![
                ScriptStep::tool_call(None, MEMORY_TOOL, json!({"query": "leather"})),
                ScriptStep::text(None, ANSWER),
            ],
            4,
        );
        let trace = out.unwrap().trace;
        let (text, spans) = serialize_episode(&trace);
        let results: Vec<&str> = trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::ToolResult)
            .map(|e| e.payload.as_str())
            .collect();
        let covered: Vec<&str> = spans.iter().map(|s| &text[s.start..s.end]).collect();
        assert_eq!(covered, results);
    }
}
