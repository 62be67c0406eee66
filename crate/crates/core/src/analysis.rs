//! Correlation of automatic scores with human judgements.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{CorpusReport, SampleReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

#[derive(Debug, Error)]
pub enum HumanScoresError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed human score record: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn degenerate(msg: impl Into<String>) -> AnalysisError {
    AnalysisError::DegenerateInput(msg.into())
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), AnalysisError> {
    if x.len() != y.len() {
        return Err(degenerate(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(degenerate(format!(
            "need at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(degenerate("non-finite value"));
    }
    Ok(())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(degenerate("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average-rank vectors.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanScores {
    pub id: String,
    pub image_quality: f64,
    pub consistency: f64,
    pub overall: f64,
}

pub fn load_human_scores(path: &Path) -> Result<Vec<HumanScores>, HumanScoresError> {
    let io = |source| HumanScoresError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| HumanScoresError::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    ImageQuality,
    Consistency,
    Overall,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [
        Dimension::ImageQuality,
        Dimension::Consistency,
        Dimension::Overall,
    ];

    /// Automatic score facing this human dimension.
    pub fn metric(self, r: &SampleReport) -> f64 {
        match self {
            Dimension::ImageQuality => (r.edit_distance + r.kendall) / 2.0,
            Dimension::Consistency => (r.alignment + r.clip) / 2.0,
            Dimension::Overall => r.mean,
        }
    }

    pub fn human(self, h: &HumanScores) -> f64 {
        match self {
            Dimension::ImageQuality => h.image_quality,
            Dimension::Consistency => h.consistency,
            Dimension::Overall => h.overall,
        }
    }
}

/// Metric and human values aligned by sample id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedScores {
    pub sample_ids: Vec<String>,
    pub metric_values: Vec<f64>,
    pub human_values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub pearson: f64,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub dimension: Dimension,
    /// Samples present on both sides.
    pub n: usize,
    pub result: Result<Coefficients, AnalysisError>,
}

pub fn pair_scores(
    report: &CorpusReport,
    human: &HashMap<String, HumanScores>,
    dim: Dimension,
) -> PairedScores {
    let mut p = PairedScores::default();
    for r in &report.per_sample {
        if let Some(h) = human.get(&r.sample_id) {
            p.sample_ids.push(r.sample_id.clone());
            p.metric_values.push(dim.metric(r));
            p.human_values.push(dim.human(h));
        }
    }
    p
}

/// One row per human dimension. A degenerate dimension is reported in its
/// row without affecting the others.
pub fn correlate_with_human(
    report: &CorpusReport,
    human: &HashMap<String, HumanScores>,
) -> Vec<CorrelationRow> {
    let matched = report
        .per_sample
        .iter()
        .filter(|r| human.contains_key(&r.sample_id))
        .count();
    let dropped = report.per_sample.len() - matched + (human.len() - matched);
    if dropped > 0 {
        log::warn!("{dropped} sample(s) present on only one side were dropped");
    }
    Dimension::ALL
        .into_iter()
        .map(|dim| {
            let p = pair_scores(report, human, dim);
            let result = pearson(&p.metric_values, &p.human_values).and_then(|pe| {
                Ok(Coefficients {
                    pearson: pe,
                    spearman: spearman(&p.metric_values, &p.human_values)?,
                })
            });
            CorrelationRow {
                dimension: dim,
                n: p.sample_ids.len(),
                result,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::FailureFlags;
    use crate::evaluator::aggregate;
    use proptest::prelude::*;

    #[test]
    fn pearson_fixtures() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // deviations (-2,-1,0,1,2) and (-1,-2,1,0,2): sxy = 8, sxx = syy = 10
        let r = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_fixtures() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(
            average_ranks(&[1.0, 2.0, 2.0, 3.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        // ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4): sxy = 4.5, sxx = 4.5, syy = 5
        let expected = 4.5 / (4.5f64 * 5.0).sqrt();
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.9487).abs() < 1e-4);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    fn report(rows: &[(&str, [f64; 5])]) -> CorpusReport {
        aggregate(
            rows.iter()
                .map(|(id, s)| SampleReport::from_scores(*id, *s, FailureFlags::default()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_human_scores_correlate_perfectly() {
        let rows: Vec<(String, [f64; 5])> = (0..5)
            .map(|i| {
                let f = i as f64;
                (
                    format!("s{i}"),
                    [f * 3.0, f * 10.0, f * 7.0 + 1.0, 50.0 - f, 20.0 + f * f],
                )
            })
            .collect();
        let rep = report(
            &rows
                .iter()
                .map(|(i, s)| (i.as_str(), *s))
                .collect::<Vec<_>>(),
        );
        let human: HashMap<String, HumanScores> = rep
            .per_sample
            .iter()
            .map(|r| {
                (
                    r.sample_id.clone(),
                    HumanScores {
                        id: r.sample_id.clone(),
                        image_quality: Dimension::ImageQuality.metric(r),
                        consistency: Dimension::Consistency.metric(r),
                        overall: r.mean,
                    },
                )
            })
            .collect();
        for row in correlate_with_human(&rep, &human) {
            let c = row.result.unwrap();
            assert!((c.pearson - 1.0).abs() < 1e-12);
            assert!((c.spearman - 1.0).abs() < 1e-12);
            assert_eq!(row.n, 5);
        }
    }

    #[test]
    fn disjoint_ids_are_degenerate_everywhere() {
        let rep = report(&[("a", [1.0; 5]), ("b", [2.0; 5])]);
        let human: HashMap<String, HumanScores> = ["x", "y"]
            .iter()
            .map(|id| {
                (
                    id.to_string(),
                    HumanScores {
                        id: id.to_string(),
                        image_quality: 1.0,
                        consistency: 1.0,
                        overall: 1.0,
                    },
                )
            })
            .collect();
        let rows = correlate_with_human(&rep, &human);
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.result.is_err() && r.n == 0));
    }

    #[test]
    fn three_sample_hand_computed() {
        // image quality metric = mean(edit, kendall): 10, 20, 60
        // consistency metric = mean(alignment, clip): 30, 10, 20
        let rep = report(&[
            ("a", [0.0, 10.0, 10.0, 30.0, 30.0]),
            ("b", [0.0, 20.0, 20.0, 10.0, 10.0]),
            ("c", [0.0, 60.0, 60.0, 20.0, 20.0]),
        ]);
        let h = |id: &str, iq: f64, c: f64, o: f64| {
            (
                id.to_string(),
                HumanScores {
                    id: id.to_string(),
                    image_quality: iq,
                    consistency: c,
                    overall: o,
                },
            )
        };
        let human: HashMap<_, _> = [
            h("a", 0.0, 2.0, 1.0),
            h("b", 1.0, 0.0, 0.0),
            h("c", 2.0, 1.0, 2.0),
        ]
        .into();
        let rows = correlate_with_human(&rep, &human);
        // image quality: x dev (-20,-10,30), y dev (-1,0,1): sxy=50, sxx=1400, syy=2
        let iq = rows[0].result.clone().unwrap();
        assert!((iq.pearson - 50.0 / (1400.0f64 * 2.0).sqrt()).abs() < 1e-9);
        assert!((iq.spearman - 1.0).abs() < 1e-9);
        // consistency: x dev (10,-10,0), y dev (1,-1,0): perfectly linear
        let c = rows[1].result.clone().unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-9);
        assert!((c.spearman - 1.0).abs() < 1e-9);
        // overall: means 16, 12, 32 (dev -4,-8,12) vs 1, 0, 2 (dev 0,-1,1): sxy=20, sxx=224, syy=2
        let o = rows[2].result.clone().unwrap();
        assert!((o.pearson - 20.0 / (224.0f64 * 2.0).sqrt()).abs() < 1e-9);
        assert!((o.spearman - 1.0).abs() < 1e-9);
    }

    fn nonconstant() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..12)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(-100.0f64..100.0, n),
                    proptest::collection::vec(-100.0f64..100.0, n),
                )
            })
            .prop_filter("nonconstant", |(x, y)| {
                x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0])
            })
    }

    proptest! {
        #[test]
        fn symmetric_bounded_affine_invariant((x, y) in nonconstant(), a in 0.1f64..10.0, b in -50.0f64..50.0) {
            let p = pearson(&x, &y).unwrap();
            let s = spearman(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&p) && (-1.0..=1.0).contains(&s));
            prop_assert!((p - pearson(&y, &x).unwrap()).abs() < 1e-12);
            prop_assert!((s - spearman(&y, &x).unwrap()).abs() < 1e-12);
            let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((p - pearson(&xt, &y).unwrap()).abs() < 1e-9);
            prop_assert!((s - spearman(&xt, &y).unwrap()).abs() < 1e-9);
            prop_assert_eq!(s, pearson(&average_ranks(&x), &average_ranks(&y)).unwrap());
        }
    }
}
