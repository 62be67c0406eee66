//! Markdown answer parsing.
//!
//! An answer is prose interleaved with image placeholders of the exact form
//!
//! ```text
//! ![alt text](IMG#k)
//! ```
//!
//! where `alt text` holds no `]` or newline, `k` is one or more ASCII digits,
//! and spaces or tabs may pad the target inside the parentheses. Document
//! citations look like `<sup>[n](DOC#n)</sup>`. Any `IMG#` occurring outside a
//! well-formed placeholder marks the answer as invalid format. Parsing never
//! fails; defects are reported through [`FailureFlags`].

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Category;

const IMG_TOKEN: &str = "IMG#";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageReference {
    pub index: usize,
    pub alt_text: String,
    /// Byte range of the whole `![..](..)` placeholder.
    pub char_span: (usize, usize),
    /// Byte range of the `IMG#k` token inside the placeholder.
    pub token_span: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureFlags {
    pub invalid_format: bool,
    /// Distinct out-of-range indices, in order of first appearance.
    pub hallucinated_indices: Vec<usize>,
}

impl FailureFlags {
    pub fn is_clean(&self) -> bool {
        !self.invalid_format && self.hallucinated_indices.is_empty()
    }

    pub fn hallucinated(&self) -> bool {
        !self.hallucinated_indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub source: String,
    /// Number of retrieved images the answer may reference.
    pub image_count: usize,
    pub image_refs: Vec<ImageReference>,
    /// Raw source between consecutive placeholders; always `image_refs.len() + 1` entries.
    pub text_segments: Vec<String>,
    /// Cited document numbers in order of appearance.
    pub citations: Vec<usize>,
    pub flags: FailureFlags,
}

impl ParsedAnswer {
    pub fn in_range(&self, index: usize) -> bool {
        (1..=self.image_count).contains(&index)
    }

    pub fn in_range_refs(&self) -> impl Iterator<Item = &ImageReference> {
        self.image_refs.iter().filter(|r| self.in_range(r.index))
    }

    /// Answer prose with placeholders and citations removed.
    pub fn prose(&self) -> String {
        self.text_segments
            .iter()
            .map(|s| strip_citations(s))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageContext {
    pub image_index: usize,
    pub before_text: String,
    pub after_text: String,
}

/// Default per-side context window in characters.
pub const DEFAULT_WINDOW_CAP: usize = 500;

/// An `IMG#` occurrence. `index` is `None` when no digits follow and saturates
/// at `usize::MAX` on overflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ImgToken {
    pub start: usize,
    pub end: usize,
    pub index: Option<usize>,
}

pub(crate) fn scan_img_tokens(s: &str) -> Vec<ImgToken> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(p) = s[from..].find(IMG_TOKEN) {
        let start = from + p;
        let digits_start = start + IMG_TOKEN.len();
        let mut end = digits_start;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        let index = (end > digits_start).then(|| parse_saturating(&s[digits_start..end]));
        out.push(ImgToken { start, end, index });
        from = digits_start;
    }
    out
}

fn parse_saturating(digits: &str) -> usize {
    digits.parse().unwrap_or(usize::MAX)
}

fn is_pad(b: u8) -> bool {
    b == b' ' || b == b'\t'
}

/// Matches a placeholder starting at `start` (which must point at `![`).
fn match_image_ref(s: &str, start: usize) -> Option<ImageReference> {
    let bytes = s.as_bytes();
    let alt_start = start + 2;
    let mut pos = alt_start;
    while pos < bytes.len() && bytes[pos] != b']' && bytes[pos] != b'\n' {
        pos += 1;
    }
    if pos >= bytes.len() || bytes[pos] != b']' {
        return None;
    }
    let alt_end = pos;
    pos += 1;
    if bytes.get(pos) != Some(&b'(') {
        return None;
    }
    pos += 1;
    while pos < bytes.len() && is_pad(bytes[pos]) {
        pos += 1;
    }
    if !s[pos..].starts_with(IMG_TOKEN) {
        return None;
    }
    let token_start = pos;
    pos += IMG_TOKEN.len();
    let digits_start = pos;
    while pos < bytes.len() && bytes[pos].is_ascii_digit() {
        pos += 1;
    }
    if pos == digits_start {
        return None;
    }
    let token_end = pos;
    while pos < bytes.len() && is_pad(bytes[pos]) {
        pos += 1;
    }
    if bytes.get(pos) != Some(&b')') {
        return None;
    }
    Some(ImageReference {
        index: parse_saturating(&s[digits_start..token_end]),
        alt_text: s[alt_start..alt_end].to_string(),
        char_span: (start, pos + 1),
        token_span: (token_start, token_end),
    })
}

/// Byte ranges and document numbers of every `<sup>[n](DOC#n)</sup>` citation.
fn find_citations(s: &str) -> Vec<(usize, usize, usize)> {
    const OPEN: &str = "<sup>[";
    let bytes = s.as_bytes();
    let digits = |mut p: usize| {
        let st = p;
        while p < bytes.len() && bytes[p].is_ascii_digit() {
            p += 1;
        }
        (p > st).then_some((st, p))
    };
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(off) = s[from..].find(OPEN) {
        let start = from + off;
        from = start + 1;
        let Some((_, p)) = digits(start + OPEN.len()) else {
            continue;
        };
        if !s[p..].starts_with("](DOC#") {
            continue;
        }
        let Some((ds, de)) = digits(p + "](DOC#".len()) else {
            continue;
        };
        if !s[de..].starts_with(")</sup>") {
            continue;
        }
        let end = de + ")</sup>".len();
        out.push((start, end, parse_saturating(&s[ds..de])));
        from = end;
    }
    out
}

/// Removes citation superscripts from `s`.
pub fn strip_citations(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last = 0;
    for (start, end, _) in find_citations(s) {
        out.push_str(&s[last..start]);
        last = end;
    }
    out.push_str(&s[last..]);
    out
}

/// Parses an answer against a sample with `image_count` retrieved images.
pub fn parse_answer(markdown: &str, image_count: usize) -> ParsedAnswer {
    let mut refs = Vec::new();
    let mut from = 0;
    while let Some(off) = markdown[from..].find("![") {
        let start = from + off;
        match match_image_ref(markdown, start) {
            Some(r) => {
                from = r.char_span.1;
                refs.push(r);
            }
            None => from = start + 1,
        }
    }

    let mut segments = Vec::with_capacity(refs.len() + 1);
    let mut last = 0;
    for r in &refs {
        segments.push(markdown[last..r.char_span.0].to_string());
        last = r.char_span.1;
    }
    segments.push(markdown[last..].to_string());

    let invalid_format = scan_img_tokens(markdown).iter().any(|t| {
        !refs
            .iter()
            .any(|r| r.token_span.0 == t.start && r.token_span.1 == t.end)
    });

    let mut seen = HashSet::new();
    let hallucinated_indices = refs
        .iter()
        .map(|r| r.index)
        .filter(|&k| !(1..=image_count).contains(&k))
        .filter(|k| seen.insert(*k))
        .collect();

    ParsedAnswer {
        source: markdown.to_string(),
        image_count,
        image_refs: refs,
        text_segments: segments,
        citations: find_citations(markdown).into_iter().map(|c| c.2).collect(),
        flags: FailureFlags {
            invalid_format,
            hallucinated_indices,
        },
    }
}

/// In-range image indices in document order; `dedupe` keeps first occurrences only.
pub fn extract_image_sequence(parsed: &ParsedAnswer, dedupe: bool) -> Vec<usize> {
    let mut seen = HashSet::new();
    parsed
        .in_range_refs()
        .map(|r| r.index)
        .filter(|k| !dedupe || seen.insert(*k))
        .collect()
}

fn tail_chars(s: &str, cap: usize) -> &str {
    match s.char_indices().rev().nth(cap.saturating_sub(1)) {
        Some((i, _)) if cap > 0 => &s[i..],
        _ if cap == 0 => "",
        _ => s,
    }
}

fn head_chars(s: &str, cap: usize) -> &str {
    match s.char_indices().nth(cap) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// One context per in-range placeholder: up to `window_cap` characters of
/// citation-free text on each side, bounded by neighbouring placeholders.
pub fn extract_contexts(parsed: &ParsedAnswer, window_cap: usize) -> Vec<ImageContext> {
    let cleaned: Vec<String> = parsed
        .text_segments
        .iter()
        .map(|s| strip_citations(s))
        .collect();
    parsed
        .image_refs
        .iter()
        .enumerate()
        .filter(|(_, r)| parsed.in_range(r.index))
        .map(|(i, r)| ImageContext {
            image_index: r.index,
            before_text: tail_chars(&cleaned[i], window_cap).to_string(),
            after_text: head_chars(&cleaned[i + 1], window_cap).to_string(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Output envelope
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEnvelope {
    pub reason: String,
    pub category: Option<Category>,
    pub answer: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("category {0:?} is not one of what-is, how-to, yes-or-no, head-to-head")]
    UnknownCategory(String),
    #[error("envelope field {0:?} must be a string")]
    NotAString(&'static str),
}

fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let Some(nl) = rest.find('\n') else { return t };
    let body = &rest[nl + 1..];
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// Splits a `{"reason", "category", "answer"}` reply. Anything that is not a
/// JSON object with an `answer` field passes through as a bare answer.
pub fn extract_answer_envelope(raw: &str) -> Result<AnswerEnvelope, EnvelopeError> {
    let bare = || AnswerEnvelope {
        reason: String::new(),
        category: None,
        answer: raw.to_string(),
    };
    let Ok(serde_json::Value::Object(map)) =
        serde_json::from_str::<serde_json::Value>(strip_code_fence(raw))
    else {
        return Ok(bare());
    };
    let Some(answer) = map.get("answer") else {
        return Ok(bare());
    };
    let answer = answer.as_str().ok_or(EnvelopeError::NotAString("answer"))?;
    let reason = match map.get("reason") {
        None | Some(serde_json::Value::Null) => "",
        Some(v) => v.as_str().ok_or(EnvelopeError::NotAString("reason"))?,
    };
    let category = match map.get("category") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => {
            let s = v.as_str().ok_or(EnvelopeError::NotAString("category"))?;
            Some(Category::parse(s).ok_or_else(|| EnvelopeError::UnknownCategory(s.to_string()))?)
        }
    };
    Ok(AnswerEnvelope {
        reason: reason.to_string(),
        category,
        answer: answer.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("no URL for image IMG#{0}")]
    MissingUrl(usize),
}

/// Replaces each in-range `IMG#k` target with `url_map[k]` and deletes
/// placeholders with out-of-range indices. Everything else is copied verbatim.
pub fn render_with_urls(
    parsed: &ParsedAnswer,
    url_map: &HashMap<usize, String>,
) -> Result<String, RenderError> {
    let src = parsed.source.as_str();
    let mut out = String::with_capacity(src.len());
    let mut last = 0;
    for r in &parsed.image_refs {
        if parsed.in_range(r.index) {
            let url = url_map
                .get(&r.index)
                .ok_or(RenderError::MissingUrl(r.index))?;
            out.push_str(&src[last..r.token_span.0]);
            out.push_str(url);
            last = r.token_span.1;
        } else {
            out.push_str(&src[last..r.char_span.0]);
            last = r.char_span.1;
        }
    }
    out.push_str(&src[last..]);
    Ok(out)
}
