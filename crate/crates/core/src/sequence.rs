//! Image selection and ordering scores over index sequences.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SequenceError {
    #[error("image index {0} appears more than once")]
    Duplicate(usize),
    #[error("image index 0 is not valid (indices are 1-based)")]
    Zero,
}

/// Ordered, duplicate-free list of 1-based image indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ImageSequence(Vec<usize>);

impl ImageSequence {
    pub fn new(indices: Vec<usize>) -> Result<Self, SequenceError> {
        let mut seen = HashSet::with_capacity(indices.len());
        for &k in &indices {
            if k == 0 {
                return Err(SequenceError::Zero);
            }
            if !seen.insert(k) {
                return Err(SequenceError::Duplicate(k));
            }
        }
        Ok(ImageSequence(indices))
    }

    pub fn empty() -> Self {
        ImageSequence(Vec::new())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for ImageSequence {
    type Error = SequenceError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        ImageSequence::new(v)
    }
}

impl From<ImageSequence> for Vec<usize> {
    fn from(s: ImageSequence) -> Self {
        s.0
    }
}

/// Images present in both sequences, in generated order, with their
/// 0-based positions in the ground truth.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectSubsequence {
    pub indices: Vec<usize>,
    pub gt_positions: Vec<usize>,
}

impl CorrectSubsequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Levenshtein distance with unit costs, two-row DP.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - levenshtein / max(m, n)`; two empty sequences score 1.
pub fn edit_distance_score(generated: &ImageSequence, ground_truth: &ImageSequence) -> f64 {
    let longest = generated.len().max(ground_truth.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(generated.as_slice(), ground_truth.as_slice()) as f64 / longest as f64
}

pub fn correct_subsequence(
    generated: &ImageSequence,
    ground_truth: &ImageSequence,
) -> CorrectSubsequence {
    let pos: HashMap<usize, usize> = ground_truth
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, i))
        .collect();
    let (indices, gt_positions) = generated
        .as_slice()
        .iter()
        .filter_map(|k| pos.get(k).map(|&p| (*k, p)))
        .unzip();
    CorrectSubsequence {
        indices,
        gt_positions,
    }
}

/// Share of concordant pairs among shared images. With at most one shared
/// image the score is `o / max(m, n)`; two empty sequences score 1.
pub fn kendall_score(generated: &ImageSequence, ground_truth: &ImageSequence) -> f64 {
    let longest = generated.len().max(ground_truth.len());
    if longest == 0 {
        return 1.0;
    }
    let correct = correct_subsequence(generated, ground_truth);
    let o = correct.len();
    if o <= 1 {
        return o as f64 / longest as f64;
    }
    let p = &correct.gt_positions;
    let concordant: usize = (0..o)
        .map(|i| p[i + 1..].iter().filter(|&&q| p[i] < q).count())
        .sum();
    concordant as f64 / (o * (o - 1) / 2) as f64
}
