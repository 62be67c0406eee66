//! Per-sample scoring across all five metrics and corpus aggregation.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{
    extract_contexts, extract_image_sequence, parse_answer, FailureFlags, DEFAULT_WINDOW_CAP,
};
use crate::consistency::{consistency_scores, ConsistencyError};
use crate::corpus::{EvalSample, ImageAsset};
use crate::provider::ScoringProvider;
use crate::sequence::{correct_subsequence, edit_distance_score, kendall_score, ImageSequence};
use crate::text::{rouge, strip_markdown_syntax, tokenize, RougeVariant, SourceKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample {id}: {source}")]
    Scoring {
        id: String,
        #[source]
        source: ConsistencyError,
    },
    #[error("answer id {0:?} does not match any corpus sample")]
    UnknownAnswerId(String),
    #[error("answer id {0:?} appears more than once")]
    DuplicateAnswerId(String),
    #[error("cannot aggregate an empty corpus")]
    EmptyCorpus,
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Error)]
pub enum AnswersError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed answer record: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Error)]
#[error("cannot write report to {path}: {source}")]
pub struct ReportError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    /// Per-side context window in characters.
    pub context_window_cap: usize,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            context_window_cap: DEFAULT_WINDOW_CAP,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Scores on the 0-100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub sample_id: String,
    pub rouge1: f64,
    pub edit_distance: f64,
    pub kendall: f64,
    pub alignment: f64,
    pub clip: f64,
    pub mean: f64,
    pub flags: FailureFlags,
}

impl SampleReport {
    /// Builds a report from the five metric scores in column order
    /// (rouge1, edit distance, kendall, alignment, clip).
    pub fn from_scores(
        sample_id: impl Into<String>,
        scores: [f64; 5],
        flags: FailureFlags,
    ) -> Self {
        let [rouge1, edit_distance, kendall, alignment, clip] = scores;
        SampleReport {
            sample_id: sample_id.into(),
            rouge1,
            edit_distance,
            kendall,
            alignment,
            clip,
            mean: scores.iter().sum::<f64>() / 5.0,
            flags,
        }
    }

    pub fn scores(&self) -> [f64; 5] {
        [
            self.rouge1,
            self.edit_distance,
            self.kendall,
            self.alignment,
            self.clip,
        ]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub rouge1: f64,
    pub edit_distance: f64,
    pub kendall: f64,
    pub alignment: f64,
    pub clip: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    /// Sorted by sample id.
    pub per_sample: Vec<SampleReport>,
    pub aggregates: MetricSummary,
    pub invalid_format_count: usize,
    /// Samples with at least one hallucinated index.
    pub hallucination_count: usize,
}

/// Runs the full metric pipeline for one answer.
///
/// Answers flagged invalid-format keep their ROUGE score but score 0 on the
/// image and consistency metrics. Only provider failures are errors.
pub fn evaluate_sample(
    sample: &EvalSample,
    answer_markdown: &str,
    provider: &dyn ScoringProvider,
    config: &EvalConfig,
) -> Result<SampleReport, EvalError> {
    let n = sample.image_count();
    let generated = parse_answer(answer_markdown, n);
    let reference = parse_answer(&sample.ground_truth, n);

    let cand = tokenize(
        &strip_markdown_syntax(&generated.prose()),
        SourceKind::Candidate,
    );
    let refr = tokenize(
        &strip_markdown_syntax(&reference.prose()),
        SourceKind::Reference,
    );
    let rouge1 = 100.0 * rouge(&cand, &refr, RougeVariant::Rouge1).f1;

    if generated.flags.invalid_format {
        return Ok(SampleReport::from_scores(
            sample.id.clone(),
            [rouge1, 0.0, 0.0, 0.0, 0.0],
            generated.flags,
        ));
    }

    let gen_seq = ImageSequence::new(extract_image_sequence(&generated, true))
        .expect("deduplicated in-range indices form a valid sequence");
    let gt_seq = ImageSequence::new(extract_image_sequence(&reference, true))
        .expect("deduplicated in-range indices form a valid sequence");
    let edit = 100.0 * edit_distance_score(&gen_seq, &gt_seq);
    let kendall = 100.0 * kendall_score(&gen_seq, &gt_seq);

    let correct = correct_subsequence(&gen_seq, &gt_seq);
    let gen_ctx = extract_contexts(&generated, config.context_window_cap);
    let gt_ctx = extract_contexts(&reference, config.context_window_cap);
    let assets: HashMap<usize, &ImageAsset> = sample.images().map(|a| (a.index, a)).collect();
    let consistency = consistency_scores(
        &generated, &gen_ctx, &gt_ctx, &correct, &assets, provider,
    )
    .map_err(|source| EvalError::Scoring {
        id: sample.id.clone(),
        source,
    })?;

    Ok(SampleReport::from_scores(
        sample.id.clone(),
        [
            rouge1,
            edit,
            kendall,
            consistency.alignment,
            consistency.clip,
        ],
        generated.flags,
    ))
}

/// Column means over samples, folded in sample-id order so the result does
/// not depend on input order.
pub fn aggregate(mut reports: Vec<SampleReport>) -> Result<CorpusReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    reports.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let n = reports.len() as f64;
    let mut sums = [0.0f64; 6];
    for r in &reports {
        for (s, v) in sums
            .iter_mut()
            .zip(r.scores().iter().chain([r.mean].iter()))
        {
            *s += v;
        }
    }
    let [rouge1, edit_distance, kendall, alignment, clip, mean] = sums.map(|s| s / n);
    Ok(CorpusReport {
        invalid_format_count: reports.iter().filter(|r| r.flags.invalid_format).count(),
        hallucination_count: reports.iter().filter(|r| r.flags.hallucinated()).count(),
        aggregates: MetricSummary {
            rouge1,
            edit_distance,
            kendall,
            alignment,
            clip,
            mean,
        },
        per_sample: reports,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    pub answer: String,
}

pub fn load_answers(path: &Path) -> Result<Vec<AnswerRecord>, AnswersError> {
    let io = |source| AnswersError::Io {
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
            serde_json::from_str(&line).map_err(|e| AnswersError::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Pairs answers with samples by id. Unknown or repeated answer ids are
/// errors; samples without an answer are paired with an empty answer.
pub fn pair_answers<'a>(
    samples: &'a [EvalSample],
    answers: &'a [AnswerRecord],
) -> Result<Vec<(&'a EvalSample, &'a str)>, EvalError> {
    let ids: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for a in answers {
        if !ids.contains(a.id.as_str()) {
            return Err(EvalError::UnknownAnswerId(a.id.clone()));
        }
        if by_id.insert(&a.id, &a.answer).is_some() {
            return Err(EvalError::DuplicateAnswerId(a.id.clone()));
        }
    }
    let missing = samples.len() - by_id.len();
    if missing > 0 {
        log::warn!("{missing} sample(s) have no answer and are scored as empty answers");
    }
    Ok(samples
        .iter()
        .map(|s| (s, by_id.get(s.id.as_str()).copied().unwrap_or("")))
        .collect())
}

/// Scores every sample on a pool of `config.workers` threads. The first
/// provider failure aborts the run.
pub fn evaluate_corpus(
    samples: &[EvalSample],
    answers: &[AnswerRecord],
    provider: &dyn ScoringProvider,
    config: &EvalConfig,
) -> Result<CorpusReport, EvalError> {
    let pairs = pair_answers(samples, answers)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let reports = pool.install(|| {
        pairs
            .par_iter()
            .map(|(s, a)| evaluate_sample(s, a, provider, config))
            .collect::<Result<Vec<_>, _>>()
    })?;
    aggregate(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Two decimals, ties away from zero. A 1e-9 nudge absorbs binary
/// representation error so that e.g. 46.005 renders as 46.01.
pub fn format_2dp(x: f64) -> String {
    let cents = (x.abs() * 100.0 + 0.5 + 1e-9).floor();
    let v = cents / 100.0;
    if x < 0.0 && cents != 0.0 {
        format!("-{v:.2}")
    } else {
        format!("{v:.2}")
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "sample_id",
    "rouge1",
    "edit_distance",
    "kendall",
    "alignment",
    "clip",
    "mean",
    "invalid_format",
    "hallucinated_indices",
];

/// Label of the trailing aggregate row in CSV output.
pub const AGGREGATE_ROW_ID: &str = "__aggregate__";

pub fn write_json<W: Write>(report: &CorpusReport, mut out: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut out, report)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// One row per sample plus a trailing aggregate row whose flag columns hold
/// the invalid-format and hallucination counts.
pub fn write_csv<W: Write>(report: &CorpusReport, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| std::io::Error::other(e);
    w.write_record(CSV_HEADER).map_err(to_io)?;
    for r in &report.per_sample {
        let mut row = vec![r.sample_id.clone()];
        row.extend(
            r.scores()
                .iter()
                .chain([r.mean].iter())
                .map(|&v| format_2dp(v)),
        );
        row.push(r.flags.invalid_format.to_string());
        row.push(
            r.flags
                .hallucinated_indices
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        );
        w.write_record(&row).map_err(to_io)?;
    }
    let a = &report.aggregates;
    let mut row = vec![AGGREGATE_ROW_ID.to_string()];
    row.extend(
        [
            a.rouge1,
            a.edit_distance,
            a.kendall,
            a.alignment,
            a.clip,
            a.mean,
        ]
        .iter()
        .map(|&v| format_2dp(v)),
    );
    row.push(report.invalid_format_count.to_string());
    row.push(report.hallucination_count.to_string());
    w.write_record(&row).map_err(to_io)?;
    w.flush()
}

pub fn emit_report(
    report: &CorpusReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), ReportError> {
    let err = |source| ReportError {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(err)?;
    let buf = std::io::BufWriter::new(file);
    match format {
        ReportFormat::Json => write_json(report, buf),
        ReportFormat::Csv => write_csv(report, buf),
    }
    .map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::sample;
    use crate::provider::MockProvider;
    use proptest::prelude::*;

    const GT: &str =
        "Intro text. ![first](IMG#1) Middle part<sup>[1](DOC#1)</sup>. ![second](IMG#2) Closing.";

    fn cfg() -> EvalConfig {
        EvalConfig {
            context_window_cap: 500,
            workers: 2,
        }
    }

    #[test]
    fn ground_truth_answer_scores_hundred() {
        let s = sample("s", &[&[1, 2], &[3]], GT);
        let r = evaluate_sample(&s, GT, &MockProvider::uniform(), &cfg()).unwrap();
        assert_eq!(r.scores(), [100.0; 5]);
        assert_eq!(r.mean, 100.0);
        assert!(r.flags.is_clean());
    }

    #[test]
    fn prose_without_images_scores_twenty() {
        let s = sample("s", &[&[1, 2]], GT);
        let answer = "Intro text.  Middle part.  Closing.";
        let r = evaluate_sample(&s, answer, &MockProvider::uniform(), &cfg()).unwrap();
        assert_eq!(r.scores(), [100.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((r.mean - 20.0).abs() < 1e-12);
    }

    #[test]
    fn hallucinated_only_answer() {
        let s = sample("s", &[&[1, 2]], GT);
        let r = evaluate_sample(&s, "Intro ![x](IMG#3)", &MockProvider::uniform(), &cfg()).unwrap();
        assert_eq!(r.flags.hallucinated_indices, vec![3]);
        assert_eq!(r.edit_distance, 0.0);
        assert_eq!(r.kendall, 0.0);
        assert_eq!(r.alignment, 0.0);
        assert_eq!(r.clip, 0.0);
    }

    #[test]
    fn invalid_format_zeroes_image_metrics_but_keeps_text() {
        let s = sample("s", &[&[1, 2]], GT);
        let answer = "Intro text. ![first](IMG#1 Middle part. Closing.";
        let r = evaluate_sample(&s, answer, &MockProvider::uniform(), &cfg()).unwrap();
        assert!(r.flags.invalid_format);
        assert!(r.rouge1 > 0.0);
        assert_eq!(&r.scores()[1..], &[0.0; 4]);
    }

    #[test]
    fn single_image_perfect_answer() {
        let gt = "only ![a](IMG#1) one";
        let s = sample("s", &[&[1, 2]], gt);
        let r = evaluate_sample(&s, gt, &MockProvider::uniform(), &cfg()).unwrap();
        assert_eq!(r.kendall, 100.0);
        assert_eq!(r.edit_distance, 100.0);
    }

    #[test]
    fn provider_failure_propagates_with_sample_id() {
        let fixture: crate::provider::MockFixture =
            serde_json::from_str(r#"{"text_vectors": {}, "pair_scores": []}"#).unwrap();
        let strict = MockProvider::from_fixture(fixture).unwrap();
        let s = sample("s-9", &[&[1, 2]], GT);
        let err = evaluate_sample(&s, GT, &strict, &cfg()).unwrap_err();
        assert!(err.to_string().contains("s-9"));
    }

    #[test]
    fn table_rows_mean() {
        let r = SampleReport::from_scores(
            "gpt4o",
            [57.42, 51.28, 46.50, 38.81, 36.04],
            FailureFlags::default(),
        );
        let c = aggregate(vec![r]).unwrap();
        assert!((c.aggregates.mean - 46.01).abs() < 0.005);
        assert_eq!(format_2dp(c.aggregates.mean), "46.01");
        let r = SampleReport::from_scores(
            "qwen",
            [43.18, 40.38, 30.12, 35.26, 40.03],
            FailureFlags::default(),
        );
        let c = aggregate(vec![r]).unwrap();
        assert!((c.aggregates.mean - 37.79).abs() < 0.005);
        assert_eq!(format_2dp(c.aggregates.mean), "37.79");
    }

    #[test]
    fn corpus_mean_of_means() {
        let a = SampleReport::from_scores("a", [20.0; 5], FailureFlags::default());
        let b = SampleReport::from_scores("b", [40.0; 5], FailureFlags::default());
        assert_eq!(aggregate(vec![a, b]).unwrap().aggregates.mean, 30.0);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(aggregate(vec![]), Err(EvalError::EmptyCorpus)));
    }

    #[test]
    fn failure_counts() {
        let bad = FailureFlags {
            invalid_format: true,
            hallucinated_indices: vec![],
        };
        let hall = FailureFlags {
            invalid_format: false,
            hallucinated_indices: vec![9, 12],
        };
        let c = aggregate(vec![
            SampleReport::from_scores("a", [0.0; 5], bad),
            SampleReport::from_scores("b", [0.0; 5], hall),
            SampleReport::from_scores("c", [0.0; 5], FailureFlags::default()),
        ])
        .unwrap();
        assert_eq!((c.invalid_format_count, c.hallucination_count), (1, 1));
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(format_2dp(46.005), "46.01");
        assert_eq!(format_2dp(0.125), "0.13");
        assert_eq!(format_2dp(100.0), "100.00");
        assert_eq!(format_2dp(-0.125), "-0.13");
        assert_eq!(format_2dp(-0.001), "0.00");
        assert_eq!(format_2dp(33.333333), "33.33");
    }

    fn one_sample_report() -> CorpusReport {
        aggregate(vec![SampleReport::from_scores(
            "s1",
            [57.42, 51.28, 46.5, 38.81, 36.04],
            FailureFlags {
                invalid_format: false,
                hallucinated_indices: vec![15],
            },
        )])
        .unwrap()
    }

    #[test]
    fn csv_has_header_row_and_aggregate() {
        let mut buf = Vec::new();
        write_csv(&one_sample_report(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines[1], "s1,57.42,51.28,46.50,38.81,36.04,46.01,false,15");
        assert_eq!(
            lines[2],
            "__aggregate__,57.42,51.28,46.50,38.81,36.04,46.01,0,1"
        );
    }

    #[test]
    fn json_round_trips() {
        let report = one_sample_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        emit_report(&report, ReportFormat::Json, &path).unwrap();
        let back: CorpusReport = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let err = emit_report(
            &one_sample_report(),
            ReportFormat::Csv,
            Path::new("/nonexistent/dir/r.csv"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/r.csv"));
    }

    #[test]
    fn unknown_and_duplicate_answer_ids() {
        let samples = vec![sample("a", &[&[1]], "![x](IMG#1)")];
        let ans = |id: &str| AnswerRecord {
            id: id.into(),
            answer: String::new(),
        };
        assert!(matches!(
            pair_answers(&samples, &[ans("zz")]),
            Err(EvalError::UnknownAnswerId(_))
        ));
        assert!(matches!(
            pair_answers(&samples, &[ans("a"), ans("a")]),
            Err(EvalError::DuplicateAnswerId(_))
        ));
        let pairs = pair_answers(&samples, &[]).unwrap();
        assert_eq!(pairs[0].1, "");
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(
            rows in proptest::collection::vec(proptest::array::uniform5(0.0f64..100.0), 1..12),
            seed in any::<u64>(),
        ) {
            let reports: Vec<SampleReport> = rows
                .iter()
                .enumerate()
                .map(|(i, s)| SampleReport::from_scores(format!("s{i:03}"), *s, FailureFlags::default()))
                .collect();
            let mut shuffled = reports.clone();
            let len = shuffled.len();
            shuffled.rotate_left((seed as usize) % len);
            shuffled.reverse();
            let a = aggregate(reports).unwrap();
            let b = aggregate(shuffled).unwrap();
            prop_assert_eq!(&a, &b);
            let col_mean: f64 = a.per_sample.iter().map(|r| r.kendall).sum::<f64>() / len as f64;
            prop_assert!((a.aggregates.kendall - col_mean).abs() < 1e-9);
            for r in &a.per_sample {
                prop_assert!((r.mean - r.scores().iter().sum::<f64>() / 5.0).abs() < 1e-9);
            }
        }
    }
}
