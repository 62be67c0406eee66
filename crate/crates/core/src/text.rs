//! Tokenization and ROUGE-N / ROUGE-L scoring.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Candidate,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub source_kind: SourceKind,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>, source_kind: SourceKind) -> Self {
        debug_assert!(tokens.iter().all(|t| !t.trim().is_empty()));
        TokenSequence {
            tokens,
            source_kind,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RougeVariant {
    Rouge1,
    Rouge2,
    RougeL,
}

impl fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RougeVariant::Rouge1 => write!(f, "ROUGE-1"),
            RougeVariant::Rouge2 => write!(f, "ROUGE-2"),
            RougeVariant::RougeL => write!(f, "ROUGE-L"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        if overlap == 0 || candidate_total == 0 || reference_total == 0 {
            return RougeScore::default();
        }
        let precision = overlap as f64 / candidate_total as f64;
        let recall = overlap as f64 / reference_total as f64;
        RougeScore {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

/// Ideographs, kana and hangul are tokenized one codepoint at a time.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF     // hiragana, katakana
        | 0x3400..=0x4DBF   // CJK extension A
        | 0x4E00..=0x9FFF   // CJK unified ideographs
        | 0xAC00..=0xD7AF   // hangul syllables
        | 0xF900..=0xFAFF   // CJK compatibility ideographs
        | 0x20000..=0x2FA1F // extensions B-F, compatibility supplement
    )
}

/// Lowercases, splits on whitespace and punctuation, and emits each CJK
/// codepoint as its own token. Markup must be removed by the caller.
pub fn tokenize(text: &str, source_kind: SourceKind) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(c.to_string());
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    TokenSequence::new(tokens, source_kind)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> RougeScore {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(
        overlap,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE of `candidate` against `reference`. N-gram overlap is clipped at the
/// reference multiplicity; an empty side scores all zeros.
pub fn rouge(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    variant: RougeVariant,
) -> RougeScore {
    let (c, r) = (&candidate.tokens[..], &reference.tokens[..]);
    match variant {
        RougeVariant::Rouge1 => rouge_n(c, r, 1),
        RougeVariant::Rouge2 => rouge_n(c, r, 2),
        RougeVariant::RougeL => RougeScore::from_counts(lcs_len(c, r), c.len(), r.len()),
    }
}

/// Drops line-leading heading markers and table pipes that the tokenizer
/// would otherwise treat as separators anyway; kept explicit so prose views
/// read cleanly.
pub fn strip_markdown_syntax(text: &str) -> String {
    text.lines()
        .map(|line| {
            let t = line.trim_start();
            let t = t.trim_start_matches('#');
            t.replace('|', " ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> TokenSequence {
        TokenSequence::new(
            v.iter().map(|s| s.to_string()).collect(),
            SourceKind::Candidate,
        )
    }

    fn words(s: &str) -> Vec<String> {
        tokenize(s, SourceKind::Candidate).tokens
    }

    #[test]
    fn tokenize_latin() {
        assert_eq!(words("The cat sat."), vec!["the", "cat", "sat"]);
    }

    #[test]
    fn tokenize_cjk_per_char() {
        assert_eq!(words("北京大学"), vec!["北", "京", "大", "学"]);
    }

    #[test]
    fn tokenize_mixed_script() {
        assert_eq!(
            words("GPU-accelerated 训练"),
            vec!["gpu", "accelerated", "训", "练"]
        );
        assert_eq!(words("用GPU训练。"), vec!["用", "gpu", "训", "练"]);
    }

    #[test]
    fn tokenize_drops_punctuation_only() {
        assert!(words("  --- | ** !! ").is_empty());
    }

    #[test]
    fn identity_scores_one() {
        let a = toks(&["a", "b"]);
        for v in [
            RougeVariant::Rouge1,
            RougeVariant::Rouge2,
            RougeVariant::RougeL,
        ] {
            assert_eq!(rouge(&a, &a, v).f1, 1.0, "{v}");
        }
    }

    #[test]
    fn partial_unigram_overlap() {
        let s = rouge(
            &toks(&["the", "cat"]),
            &toks(&["the", "cat", "sat"]),
            RougeVariant::Rouge1,
        );
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn disjoint_scores_zero() {
        let s = rouge(&toks(&["a"]), &toks(&["b"]), RougeVariant::Rouge1);
        assert_eq!(s, RougeScore::default());
    }

    #[test]
    fn empty_side_scores_zero() {
        let e = toks(&[]);
        let a = toks(&["a"]);
        for v in [
            RougeVariant::Rouge1,
            RougeVariant::Rouge2,
            RougeVariant::RougeL,
        ] {
            assert_eq!(rouge(&e, &a, v), RougeScore::default());
            assert_eq!(rouge(&a, &e, v), RougeScore::default());
        }
    }

    #[test]
    fn clipping_limits_repeated_candidate_tokens() {
        // candidate "the the the", reference "the cat": overlap clipped to 1
        let s = rouge(
            &toks(&["the", "the", "the"]),
            &toks(&["the", "cat"]),
            RougeVariant::Rouge1,
        );
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lcs_counts_subsequence() {
        let s = rouge(
            &toks(&["a", "x", "b", "c"]),
            &toks(&["a", "b", "y", "c"]),
            RougeVariant::RougeL,
        );
        assert!((s.precision - 0.75).abs() < 1e-12);
        assert!((s.recall - 0.75).abs() < 1e-12);
    }

    #[test]
    fn markdown_syntax_stripped() {
        assert_eq!(
            strip_markdown_syntax("## Title\n| a | b |"),
            " Title\n  a   b  "
        );
    }

    proptest! {
        #[test]
        fn bounds_hold(
            a in proptest::collection::vec("[a-d]", 0..10),
            b in proptest::collection::vec("[a-d]", 0..10),
        ) {
            let (a, b) = (TokenSequence::new(a, SourceKind::Candidate), TokenSequence::new(b, SourceKind::Reference));
            for v in [RougeVariant::Rouge1, RougeVariant::Rouge2, RougeVariant::RougeL] {
                let s = rouge(&a, &b, v);
                for x in [s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
                if s.precision + s.recall > 0.0 {
                    let h = 2.0 * s.precision * s.recall / (s.precision + s.recall);
                    prop_assert!((s.f1 - h).abs() < 1e-12);
                }
            }
            let ab = rouge(&a, &b, RougeVariant::Rouge1);
            let ba = rouge(&b, &a, RougeVariant::Rouge1);
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
            prop_assert!((ab.precision - ba.recall).abs() < 1e-12);
        }

        #[test]
        fn appending_matching_token_keeps_recall(
            a in proptest::collection::vec("[a-d]", 0..10),
            b in proptest::collection::vec("[a-d]", 1..10),
            pick in any::<proptest::sample::Index>(),
        ) {
            let before = rouge(&toks(&a.iter().map(String::as_str).collect::<Vec<_>>()), &toks(&b.iter().map(String::as_str).collect::<Vec<_>>()), RougeVariant::Rouge1);
            let mut longer = a.clone();
            longer.push(b[pick.index(b.len())].clone());
            let after = rouge(&toks(&longer.iter().map(String::as_str).collect::<Vec<_>>()), &toks(&b.iter().map(String::as_str).collect::<Vec<_>>()), RougeVariant::Rouge1);
            prop_assert!(after.recall >= before.recall);
        }

        #[test]
        fn self_similarity_is_one(a in proptest::collection::vec("[a-z]{1,3}", 1..15)) {
            let s = TokenSequence::new(a.clone(), SourceKind::Candidate);
            prop_assert_eq!(rouge(&s, &s, RougeVariant::Rouge1).f1, 1.0);
            prop_assert_eq!(rouge(&s, &s, RougeVariant::RougeL).f1, 1.0);
            if a.len() >= 2 {
                prop_assert_eq!(rouge(&s, &s, RougeVariant::Rouge2).f1, 1.0);
            }
        }
    }
}
