use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub max_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self {
            max_chars: 600,
            overlap_chars: 80,
        }
    }
}

/// Splits `text` into chunks of at most `max_chars` characters.
///
/// Each chunk after the first starts with the last `overlap_chars`
/// characters of its predecessor. Cuts land after the last sentence boundary
/// (`". "`, `"? "`, `"! "`, newline) inside the window when there is one
/// past the overlap region; otherwise the window is hard-split.
///
/// Panics if `overlap_chars >= max_chars`.
pub fn chunk_text(text: &str, max_chars: usize, overlap_chars: usize) -> Vec<String> {
    assert!(
        overlap_chars < max_chars,
        "overlap_chars ({overlap_chars}) must be smaller than max_chars ({max_chars})"
    );
    let chars: Vec<char> = text.chars().collect();
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        if chars.len() - start <= max_chars {
            chunks.push(chars[start..].iter().collect());
            break;
        }
        let window_end = start + max_chars;
        let end =
            last_boundary(&chars, start + overlap_chars + 1, window_end).unwrap_or(window_end);
        chunks.push(chars[start..end].iter().collect());
        start = end - overlap_chars;
    }
    chunks
}

/// Largest cut position `p` in `[lo, hi]` such that `chars[..p]` ends at a sentence boundary.
fn last_boundary(chars: &[char], lo: usize, hi: usize) -> Option<usize> {
    (lo..=hi).rev().find(|&p| {
        if p == 0 || p > chars.len() {
            return false;
        }
        let prev = chars[p - 1];
        if prev == '\n' {
            return true;
        }
        p >= 2 && prev == ' ' && matches!(chars[p - 2], '.' | '?' | '!')
    })
}

/// Inverse of [`chunk_text`]: drops each later chunk's overlap prefix and concatenates.
pub fn reconstruct(chunks: &[String], overlap_chars: usize) -> String {
    let mut out = String::new();
    for (i, chunk) in chunks.iter().enumerate() {
        if i == 0 {
            out.push_str(chunk);
        } else {
            out.extend(chunk.chars().skip(overlap_chars));
        }
    }
    out
}
