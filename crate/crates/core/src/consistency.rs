//! Image-text consistency: context alignment between generated and reference
//! answers, and direct image-to-text similarity.
//!
//! Both scores map a similarity `s` in [-1, 1] to `100 * max(0, s)` and
//! average over images.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{ImageContext, ParsedAnswer};
use crate::corpus::ImageAsset;
use crate::provider::{ImageTextPair, ProviderError, ScoringProvider};
use crate::sequence::CorrectSubsequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsistencyError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cannot take cosine of an all-zero vector")]
    ZeroVector,
    #[error("no context for image IMG#{0}")]
    MissingContext(usize),
    #[error("no asset for image IMG#{0}")]
    MissingAsset(usize),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding batch is empty")]
    EmptyBatch,
    #[error("provider does not support image-text scoring")]
    Unsupported,
}

fn contract(msg: String) -> ConsistencyError {
    ConsistencyError::Provider(ProviderError::Contract(msg))
}

/// Non-zero, finite embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Result<Self, ConsistencyError> {
        if components.iter().all(|&x| x == 0.0) {
            return Err(ConsistencyError::ZeroVector);
        }
        Ok(EmbeddingVector(components))
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Embeds `texts` and checks the reply: one vector per text, each of the
/// advertised dimension, finite and non-zero.
pub fn embed_texts(
    provider: &dyn ScoringProvider,
    texts: &[String],
) -> Result<Vec<EmbeddingVector>, ConsistencyError> {
    if texts.is_empty() {
        return Err(ConsistencyError::EmptyBatch);
    }
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(ConsistencyError::EmptyText);
    }
    let dim = provider.capabilities()?.embedding_dim;
    let raw = provider.embed_texts(texts)?;
    if raw.len() != texts.len() {
        return Err(contract(format!(
            "asked for {} embeddings, got {}",
            texts.len(),
            raw.len()
        )));
    }
    raw.into_iter()
        .map(|v| {
            if v.len() != dim {
                return Err(contract(format!(
                    "embedding has length {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(contract("embedding has non-finite component".into()));
            }
            EmbeddingVector::new(v).map_err(|_| contract("embedding is all zeros".into()))
        })
        .collect()
}

pub fn cosine_similarity(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
) -> Result<f64, ConsistencyError> {
    if a.dim() != b.dim() {
        return Err(ConsistencyError::DimensionMismatch(a.dim(), b.dim()));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let sa: f64 = a.0.iter().map(|x| x * x).sum();
    let sb: f64 = b.0.iter().map(|x| x * x).sum();
    if sa == 0.0 || sb == 0.0 {
        return Err(ConsistencyError::ZeroVector);
    }
    // A single rounded sqrt keeps cos(v, v) at exactly 1.
    let product = sa * sb;
    let norm = if product.is_normal() {
        product.sqrt()
    } else {
        sa.sqrt() * sb.sqrt()
    };
    Ok((dot / norm).clamp(-1.0, 1.0))
}

/// Similarity in [-1, 1] to a score in [0, 100].
pub fn similarity_to_score(sim: f64) -> f64 {
    100.0 * sim.max(0.0)
}

fn mean_score(sims: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = sims.len();
    if n == 0 {
        return 0.0;
    }
    sims.map(similarity_to_score).sum::<f64>() / n as f64
}

fn join_nonempty<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    parts
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Text embedded for an image's context: trimmed before and after text joined by a space.
pub fn context_text(ctx: &ImageContext) -> String {
    join_nonempty([ctx.before_text.as_str(), ctx.after_text.as_str()])
}

fn first_contexts(contexts: &[ImageContext]) -> HashMap<usize, &ImageContext> {
    let mut map = HashMap::new();
    for c in contexts {
        map.entry(c.image_index).or_insert(c);
    }
    map
}

/// Per-image context similarity for every image in `correct`, in its order.
///
/// Two empty contexts count as identical (1.0); an empty context against a
/// non-empty one counts as 0.0. All non-empty texts go out in one batch.
pub fn alignment_similarities(
    gen_contexts: &[ImageContext],
    gt_contexts: &[ImageContext],
    correct: &CorrectSubsequence,
    provider: &dyn ScoringProvider,
) -> Result<Vec<(usize, f64)>, ConsistencyError> {
    let gen = first_contexts(gen_contexts);
    let gt = first_contexts(gt_contexts);
    let mut pairs = Vec::with_capacity(correct.len());
    for &k in &correct.indices {
        let g = gen.get(&k).ok_or(ConsistencyError::MissingContext(k))?;
        let r = gt.get(&k).ok_or(ConsistencyError::MissingContext(k))?;
        pairs.push((k, context_text(g), context_text(r)));
    }

    let mut batch: Vec<String> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (_, a, b) in &pairs {
        for t in [a, b] {
            if !t.is_empty() && !slot.contains_key(t) {
                slot.insert(t.clone(), batch.len());
                batch.push(t.clone());
            }
        }
    }
    let vectors = if batch.is_empty() {
        Vec::new()
    } else {
        embed_texts(provider, &batch)?
    };

    pairs
        .into_iter()
        .map(|(k, a, b)| {
            let sim = match (a.is_empty(), b.is_empty()) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                (false, false) => cosine_similarity(&vectors[slot[&a]], &vectors[slot[&b]])?,
            };
            Ok((k, sim))
        })
        .collect()
}

/// Mean mapped context similarity over shared images; 0 when none are shared.
pub fn alignment_score(
    gen_contexts: &[ImageContext],
    gt_contexts: &[ImageContext],
    correct: &CorrectSubsequence,
    provider: &dyn ScoringProvider,
) -> Result<f64, ConsistencyError> {
    let sims = alignment_similarities(gen_contexts, gt_contexts, correct, provider)?;
    Ok(mean_score(sims.into_iter().map(|(_, s)| s)))
}

fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Per-image image-text similarity for each distinct in-range image of the
/// answer (first occurrence wins). `contexts` must come from
/// [`crate::answer::extract_contexts`] on the same answer.
///
/// The text paired with an image is its alt text plus surrounding context,
/// truncated to the provider's limit. An image with no text at all scores 0.
pub fn clip_similarities(
    parsed: &ParsedAnswer,
    contexts: &[ImageContext],
    assets: &HashMap<usize, &ImageAsset>,
    provider: &dyn ScoringProvider,
) -> Result<Vec<(usize, f64)>, ConsistencyError> {
    let mut seen = std::collections::HashSet::new();
    let mut items = Vec::new();
    for (r, ctx) in parsed.in_range_refs().zip(contexts) {
        debug_assert_eq!(r.index, ctx.image_index);
        if !seen.insert(r.index) {
            continue;
        }
        let asset = assets
            .get(&r.index)
            .ok_or(ConsistencyError::MissingAsset(r.index))?;
        let text = join_nonempty([
            r.alt_text.as_str(),
            ctx.before_text.as_str(),
            ctx.after_text.as_str(),
        ]);
        items.push((r.index, asset.locator.clone(), text));
    }
    if items.is_empty() {
        return Ok(Vec::new());
    }

    let caps = provider.capabilities()?;
    if !caps.supports_image_text {
        return Err(ConsistencyError::Unsupported);
    }
    let request: Vec<ImageTextPair> = items
        .iter()
        .filter(|(_, _, t)| !t.is_empty())
        .map(|(_, image, text)| ImageTextPair {
            image: image.clone(),
            text: truncate_chars(text, caps.max_text_len).to_string(),
        })
        .collect();
    let scores = if request.is_empty() {
        Vec::new()
    } else {
        provider.score_image_text(&request)?
    };
    if scores.len() != request.len() {
        return Err(contract(format!(
            "asked for {} image-text scores, got {}",
            request.len(),
            scores.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
        return Err(contract(format!("image-text score {s} outside [-1, 1]")));
    }

    let mut next = scores.into_iter();
    Ok(items
        .into_iter()
        .map(|(k, _, text)| {
            let sim = if text.is_empty() {
                0.0
            } else {
                next.next().expect("one score per non-empty text")
            };
            (k, sim)
        })
        .collect())
}

/// Mean mapped image-text similarity; 0 when the answer has no in-range image.
pub fn clip_score(
    parsed: &ParsedAnswer,
    contexts: &[ImageContext],
    assets: &HashMap<usize, &ImageAsset>,
    provider: &dyn ScoringProvider,
) -> Result<f64, ConsistencyError> {
    let sims = clip_similarities(parsed, contexts, assets, provider)?;
    Ok(mean_score(sims.into_iter().map(|(_, s)| s)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSimilarity {
    pub image_index: usize,
    pub alignment_sim: Option<f64>,
    pub clip_sim: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScores {
    pub alignment: f64,
    pub clip: f64,
    pub per_image: Vec<ImageSimilarity>,
}

/// Both consistency scores plus per-image detail, ordered by first
/// appearance in the generated answer.
pub fn consistency_scores(
    generated: &ParsedAnswer,
    gen_contexts: &[ImageContext],
    gt_contexts: &[ImageContext],
    correct: &CorrectSubsequence,
    assets: &HashMap<usize, &ImageAsset>,
    provider: &dyn ScoringProvider,
) -> Result<ConsistencyScores, ConsistencyError> {
    let align = alignment_similarities(gen_contexts, gt_contexts, correct, provider)?;
    let clip = clip_similarities(generated, gen_contexts, assets, provider)?;
    let align_map: HashMap<usize, f64> = align.iter().copied().collect();
    let per_image = clip
        .iter()
        .map(|&(k, c)| ImageSimilarity {
            image_index: k,
            alignment_sim: align_map.get(&k).copied(),
            clip_sim: Some(c),
        })
        .collect();
    Ok(ConsistencyScores {
        alignment: mean_score(align.into_iter().map(|(_, s)| s)),
        clip: mean_score(clip.into_iter().map(|(_, s)| s)),
        per_image,
    })
}
