//! Prompt templates shipped with the crate.
//!
//! Placeholders are `{name}` where the name starts with a letter and may
//! contain letters, digits, spaces, `_` and `-`. `{{` and `}}` render as
//! literal braces. Any other brace is copied through unchanged, so the JSON
//! examples inside the indexing prompts need no escaping beyond what they
//! already carry.

/// Bumped whenever any template text changes.
pub const TEMPLATE_VERSION: u32 = 1;

pub const QUERY_SIMPLIFICATION: &str = "query_simplification";
pub const GLOBAL_MEMORY_A: &str = "global_memory_a";
pub const GLOBAL_MEMORY_B: &str = "global_memory_b";
pub const PREFERENCE_PATTERNS: &str = "preference_patterns";
pub const USER_PROFILE: &str = "user_profile";
pub const RECOMMENDATION: &str = "recommendation";
pub const JUDGE_MPC: &str = "judge_mpc";
pub const JUDGE_MRC: &str = "judge_mrc";

const TEMPLATES: &[(&str, &str)] = &[
    (
        QUERY_SIMPLIFICATION,
        include_str!("../../templates/query_simplification.txt"),
    ),
    (
        GLOBAL_MEMORY_A,
        include_str!("../../templates/global_memory_a.txt"),
    ),
    (
        GLOBAL_MEMORY_B,
        include_str!("../../templates/global_memory_b.txt"),
    ),
    (
        PREFERENCE_PATTERNS,
        include_str!("../../templates/preference_patterns.txt"),
    ),
    (
        USER_PROFILE,
        include_str!("../../templates/user_profile.txt"),
    ),
    (
        RECOMMENDATION,
        include_str!("../../templates/recommendation.txt"),
    ),
    (JUDGE_MPC, include_str!("../../templates/judge_mpc.txt")),
    (JUDGE_MRC, include_str!("../../templates/judge_mrc.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
}

pub fn template_text(name: &str) -> Result<&'static str, TemplateError> {
    TEMPLATES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))
}

pub fn template_names() -> impl Iterator<Item = &'static str> {
    TEMPLATES.iter().map(|(n, _)| *n)
}

pub fn render_prompt(name: &str, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
    render_str(template_text(name)?, bindings)
}

/// Placeholder names referenced by a template, in order of first appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut names = Vec::new();
    for_each_piece(template, |piece| {
        if let Piece::Placeholder(name) = piece {
            if !names.iter().any(|n| n == name) {
                names.push(name.to_string());
            }
        }
    });
    names
}

pub fn render_str(template: &str, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut missing: Option<String> = None;
    for_each_piece(template, |piece| match piece {
        Piece::Literal(text) => out.push_str(text),
        Piece::Placeholder(name) => match bindings.iter().find(|(k, _)| *k == name) {
            Some((_, value)) => out.push_str(value),
            None => {
                if missing.is_none() {
                    missing = Some(name.to_string());
                }
            }
        },
    });
    match missing {
        Some(name) => Err(TemplateError::UnboundPlaceholder(name)),
        None => Ok(out),
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn for_each_piece<'a>(template: &'a str, mut f: impl FnMut(Piece<'a>)) {
    let bytes = template.as_bytes();
    let mut i = 0;
    let mut lit_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                f(Piece::Literal(&template[lit_start..i + 1]));
                i += 2;
                lit_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                f(Piece::Literal(&template[lit_start..i + 1]));
                i += 2;
                lit_start = i;
            }
            b'{' => match placeholder_end(bytes, i) {
                Some(end) => {
                    f(Piece::Literal(&template[lit_start..i]));
                    f(Piece::Placeholder(&template[i + 1..end]));
                    i = end + 1;
                    lit_start = i;
                }
                None => i += 1,
            },
            _ => i += 1,
        }
    }
    f(Piece::Literal(&template[lit_start..]));
}

/// Index of the closing brace when `bytes[open]` starts a placeholder.
fn placeholder_end(bytes: &[u8], open: usize) -> Option<usize> {
    let first = *bytes.get(open + 1)?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    let mut j = open + 2;
    while let Some(&c) = bytes.get(j) {
        match c {
            b'}' => return Some(j),
            c if c.is_ascii_alphanumeric() || matches!(c, b' ' | b'_' | b'-') => j += 1,
            _ => return None,
        }
    }
    None
}
