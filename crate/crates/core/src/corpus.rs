//! Benchmark data model: samples, retrieved documents, indexed images,
//! JSONL corpus loading and prompt construction.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::scan_img_tokens;

/// Upper bound on retrieved documents per sample.
pub const MAX_DOCUMENTS: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Schema { line: usize, message: String },
    #[error("sample {id}: {}", join_violations(.violations))]
    Invariant {
        id: String,
        violations: Vec<Violation>,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Query taxonomy used by the generation prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    WhatIs,
    HowTo,
    YesOrNo,
    HeadToHead,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::WhatIs,
        Category::HowTo,
        Category::YesOrNo,
        Category::HeadToHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::WhatIs => "what-is",
            Category::HowTo => "how-to",
            Category::YesOrNo => "yes-or-no",
            Category::HeadToHead => "head-to-head",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAsset {
    /// 1-based, global within the sample.
    pub index: usize,
    /// URL or file path; opaque to the scorer.
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_px: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedDocument {
    pub doc_index: usize,
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageAsset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    pub query: String,
    pub documents: Vec<RetrievedDocument>,
    /// Reference answer, markdown with `IMG#k` placeholders.
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

impl EvalSample {
    /// Total number of retrieved images (N).
    pub fn image_count(&self) -> usize {
        self.documents.iter().map(|d| d.images.len()).sum()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageAsset> {
        self.documents.iter().flat_map(|d| d.images.iter())
    }

    pub fn asset(&self, index: usize) -> Option<&ImageAsset> {
        self.images().find(|a| a.index == index)
    }
}

/// One broken invariant of an [`EvalSample`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyId,
    DocumentLimitExceeded { count: usize },
    InvalidDocIndex { doc_index: usize },
    DuplicateDocIndex { doc_index: usize },
    EmptyDocumentText { doc_index: usize },
    NoImages,
    ZeroImageIndex,
    DuplicateIndex { index: usize },
    NonContiguousIndices { missing: Vec<usize> },
    EmptyLocator { index: usize },
    ZeroWidth { index: usize },
    GroundTruthIndexOutOfRange { index: usize, image_count: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty id"),
            Violation::DocumentLimitExceeded { count } => {
                write!(f, "document limit exceeded: {count} > {MAX_DOCUMENTS}")
            }
            Violation::InvalidDocIndex { doc_index } => {
                write!(f, "document index must be >= 1, got {doc_index}")
            }
            Violation::DuplicateDocIndex { doc_index } => {
                write!(f, "duplicate document index {doc_index}")
            }
            Violation::EmptyDocumentText { doc_index } => {
                write!(f, "document {doc_index} has empty text")
            }
            Violation::NoImages => write!(f, "sample has no images"),
            Violation::ZeroImageIndex => write!(f, "image index 0 (indices are 1-based)"),
            Violation::DuplicateIndex { index } => write!(f, "duplicate index {index}"),
            Violation::NonContiguousIndices { missing } => {
                write!(f, "image indices not contiguous, missing {missing:?}")
            }
            Violation::EmptyLocator { index } => write!(f, "image {index} has empty locator"),
            Violation::ZeroWidth { index } => write!(f, "image {index} has zero width"),
            Violation::GroundTruthIndexOutOfRange { index, image_count } => write!(
                f,
                "ground truth references IMG#{index} but sample has {image_count} images"
            ),
        }
    }
}

/// Checks every sample-level invariant. An empty list means the sample is valid.
pub fn validate_sample(sample: &EvalSample) -> Vec<Violation> {
    let mut out = Vec::new();
    if sample.id.is_empty() {
        out.push(Violation::EmptyId);
    }
    if sample.documents.len() > MAX_DOCUMENTS {
        out.push(Violation::DocumentLimitExceeded {
            count: sample.documents.len(),
        });
    }

    let mut doc_seen = HashSet::new();
    for doc in &sample.documents {
        if doc.doc_index == 0 {
            out.push(Violation::InvalidDocIndex { doc_index: 0 });
        } else if !doc_seen.insert(doc.doc_index) {
            out.push(Violation::DuplicateDocIndex {
                doc_index: doc.doc_index,
            });
        }
        if doc.text.trim().is_empty() {
            out.push(Violation::EmptyDocumentText {
                doc_index: doc.doc_index,
            });
        }
    }

    let n = sample.image_count();
    if n == 0 {
        out.push(Violation::NoImages);
    }

    let mut seen = BTreeSet::new();
    for img in sample.images() {
        if img.index == 0 {
            out.push(Violation::ZeroImageIndex);
        } else if !seen.insert(img.index) {
            out.push(Violation::DuplicateIndex { index: img.index });
        }
        if img.locator.is_empty() {
            out.push(Violation::EmptyLocator { index: img.index });
        }
        if img.width_px == Some(0) {
            out.push(Violation::ZeroWidth { index: img.index });
        }
    }
    // Distinct indices must be exactly 1..=k; duplicates are reported separately.
    if let Some(&max) = seen.last() {
        let missing: Vec<usize> = (1..=max).filter(|i| !seen.contains(i)).collect();
        if !missing.is_empty() {
            out.push(Violation::NonContiguousIndices { missing });
        }
    }

    let mut reported = HashSet::new();
    for k in scan_img_tokens(&sample.ground_truth)
        .iter()
        .filter_map(|t| t.index)
    {
        if (k == 0 || k > n) && reported.insert(k) {
            out.push(Violation::GroundTruthIndexOutOfRange {
                index: k,
                image_count: n,
            });
        }
    }
    out
}

/// Loads a JSONL corpus. Blank lines are skipped; every record is validated
/// and ids must be unique.
pub fn load_corpus(path: &Path) -> Result<Vec<EvalSample>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: EvalSample = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        let violations = validate_sample(&sample);
        if !violations.is_empty() {
            return Err(CorpusError::Invariant {
                id: sample.id,
                violations,
            });
        }
        if !ids.insert(sample.id.clone()) {
            return Err(CorpusError::Schema {
                line: lineno,
                message: format!("duplicate sample id {:?}", sample.id),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples in the canonical one-record-per-line layout read by [`load_corpus`].
pub fn write_corpus<W: Write>(mut out: W, samples: &[EvalSample]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

// ---------------------------------------------------------------------------
// Prompt construction
// ---------------------------------------------------------------------------

const QUERY_SLOT: &str = "{{query}}";
const DOC_TEXT_SLOT: &str = "{{doc_text}}";
const DOC_IMAGES_SLOT: &str = "{{doc_images}}";
const DOCS_OPEN: &str = "{{#docs}}";
const DOCS_CLOSE: &str = "{{/docs}}";

const DEFAULT_TEMPLATE: &str = include_str!("../templates/answer_prompt.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template has no {0} slot")]
    MissingSlot(&'static str),
    #[error("template slot {0} must appear inside the {{{{#docs}}}} block")]
    SlotOutsideBlock(&'static str),
    #[error("template has more than one {{{{#docs}}}} block")]
    RepeatedBlock,
    #[error("cannot read template {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Generation prompt with a query slot and a per-document repeat block.
///
/// Slot syntax: `{{query}}` anywhere, and `{{doc_text}}` / `{{doc_images}}`
/// inside a single `{{#docs}}...{{/docs}}` block that is emitted once per
/// retrieved document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub body: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            body: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(body: impl Into<String>) -> Self {
        PromptTemplate { body: body.into() }
    }

    pub fn from_file(path: &Path) -> Result<Self, TemplateError> {
        fs::read_to_string(path)
            .map(PromptTemplate::new)
            .map_err(|e| TemplateError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

enum Piece<'a> {
    Lit(&'a str),
    Query,
    DocText,
    DocImages,
}

fn split_slots(s: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = s;
    loop {
        let next = [(QUERY_SLOT, 0u8), (DOC_TEXT_SLOT, 1), (DOC_IMAGES_SLOT, 2)]
            .iter()
            .filter_map(|(m, k)| rest.find(m).map(|p| (p, *m, *k)))
            .min_by_key(|(p, _, _)| *p);
        match next {
            None => {
                pieces.push(Piece::Lit(rest));
                return pieces;
            }
            Some((p, marker, kind)) => {
                pieces.push(Piece::Lit(&rest[..p]));
                pieces.push(match kind {
                    0 => Piece::Query,
                    1 => Piece::DocText,
                    _ => Piece::DocImages,
                });
                rest = &rest[p + marker.len()..];
            }
        }
    }
}

/// Renders the generation prompt for `sample`.
///
/// Each document's text is prefixed by its `DOC#n` label and its images are
/// listed as `IMG#k` tokens in ascending order. Substitution is single-pass,
/// so slot markers inside sample text are left as-is.
pub fn build_prompt(
    sample: &EvalSample,
    template: &PromptTemplate,
) -> Result<String, TemplateError> {
    let body = template.body.as_str();
    let open = body
        .find(DOCS_OPEN)
        .ok_or(TemplateError::MissingSlot(DOCS_OPEN))?;
    let close_rel = body[open..]
        .find(DOCS_CLOSE)
        .ok_or(TemplateError::MissingSlot(DOCS_CLOSE))?;
    let close = open + close_rel;
    let head = &body[..open];
    let block = &body[open + DOCS_OPEN.len()..close];
    let tail = &body[close + DOCS_CLOSE.len()..];
    if head.contains(DOCS_OPEN) || tail.contains(DOCS_OPEN) || block.contains(DOCS_OPEN) {
        return Err(TemplateError::RepeatedBlock);
    }
    if !body.contains(QUERY_SLOT) {
        return Err(TemplateError::MissingSlot(QUERY_SLOT));
    }
    for slot in [DOC_TEXT_SLOT, DOC_IMAGES_SLOT] {
        if !block.contains(slot) {
            return Err(TemplateError::MissingSlot(slot));
        }
        if head.contains(slot) || tail.contains(slot) {
            return Err(TemplateError::SlotOutsideBlock(slot));
        }
    }

    let mut out = String::with_capacity(body.len() + sample.query.len());
    render_pieces(&mut out, head, sample, None);
    for doc in &sample.documents {
        render_pieces(&mut out, block, sample, Some(doc));
    }
    render_pieces(&mut out, tail, sample, None);
    Ok(out)
}

fn render_pieces(
    out: &mut String,
    part: &str,
    sample: &EvalSample,
    doc: Option<&RetrievedDocument>,
) {
    for piece in split_slots(part) {
        match piece {
            Piece::Lit(s) => out.push_str(s),
            Piece::Query => out.push_str(&sample.query),
            Piece::DocText => {
                if let Some(d) = doc {
                    out.push_str(&format!("DOC#{}\n{}", d.doc_index, d.text));
                }
            }
            Piece::DocImages => {
                if let Some(d) = doc {
                    let mut idx: Vec<usize> = d.images.iter().map(|i| i.index).collect();
                    idx.sort_unstable();
                    let list: Vec<String> = idx.iter().map(|k| format!("IMG#{k}")).collect();
                    out.push('[');
                    out.push_str(&list.join(", "));
                    out.push(']');
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn sample(id: &str, doc_images: &[&[usize]], gt: &str) -> EvalSample {
        let documents = doc_images
            .iter()
            .enumerate()
            .map(|(i, imgs)| RetrievedDocument {
                doc_index: i + 1,
                text: format!("d{}", i + 1),
                images: imgs
                    .iter()
                    .map(|&k| ImageAsset {
                        index: k,
                        locator: format!("http://img/{k}.jpg"),
                        width_px: None,
                    })
                    .collect(),
            })
            .collect();
        EvalSample {
            id: id.to_string(),
            query: "q1".to_string(),
            documents,
            ground_truth: gt.to_string(),
            category: None,
        }
    }
}
