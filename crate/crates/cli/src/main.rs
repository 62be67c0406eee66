mod failure;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use interleave_eval::analysis::{correlate_with_human, load_human_scores, Dimension};
use interleave_eval::answer::{
    extract_answer_envelope, extract_contexts, extract_image_sequence, render_with_urls,
    ImageContext, ParsedAnswer,
};
use interleave_eval::corpus::{build_prompt, PromptTemplate};
use interleave_eval::evaluator::{emit_report, load_answers, AnswerRecord, ReportFormat};
use interleave_eval::reward::{handle_batch, reward_from_report, BatchRewardRequest};
use interleave_eval::{
    evaluate_corpus, load_corpus, parse_answer, Category, CorpusReport, EvalConfig, EvalSample,
    HttpProvider, MockProvider, RewardConfig, ScoringProvider,
};

use failure::{Classify, Failure};

const ENDPOINT_ENV: &str = "ILEVAL_PROVIDER_ENDPOINT";

#[derive(Parser)]
#[command(
    name = "ileval",
    version,
    about = "Score interleaved image-text answers against reference answers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a corpus of answers and write a report
    Evaluate(EvaluateArgs),
    /// Dump the structure and defect flags of one answer
    Parse(ParseArgs),
    /// Correlate a report with human judgements
    Correlate(CorrelateArgs),
    /// Compute per-sample training rewards
    Reward(RewardArgs),
    /// Substitute image URLs into an answer
    Render(RenderArgs),
    /// Print the generation prompt for one sample
    Prompt(PromptArgs),
}

#[derive(Args)]
#[group(multiple = false)]
struct ProviderArgs {
    /// Base URL of a scoring sidecar (falls back to $ILEVAL_PROVIDER_ENDPOINT)
    #[arg(long)]
    provider_endpoint: Option<String>,

    /// JSON fixture for the offline mock provider
    #[arg(long)]
    mock_fixture: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,

    #[command(flatten)]
    provider: ProviderArgs,

    /// Worker threads (default: available parallelism)
    #[arg(long)]
    workers: Option<NonZeroUsize>,

    /// Per-side context window in characters
    #[arg(long, default_value = "500")]
    context_window_cap: NonZeroUsize,

    /// Per-request timeout for the sidecar
    #[arg(long, default_value = "60")]
    provider_timeout_secs: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,

    #[arg(long)]
    answers: PathBuf,

    #[arg(long)]
    out: PathBuf,

    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    answer_file: PathBuf,

    #[arg(long)]
    image_count: usize,

    /// Treat the file as a {"reason", "category", "answer"} reply
    #[arg(long)]
    envelope: bool,

    #[arg(long, default_value = "500")]
    context_window_cap: usize,
}

#[derive(Args)]
struct CorrelateArgs {
    /// JSON report written by `evaluate`
    #[arg(long)]
    report: PathBuf,

    /// JSONL of {"id", "image_quality", "consistency", "overall"}
    #[arg(long)]
    human: PathBuf,

    /// Also write the table as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RewardArgs {
    #[command(flatten)]
    run: RunArgs,

    #[arg(long, required_unless_present = "batch_request")]
    answers: Option<PathBuf>,

    /// Serve one {"samples", "answers"} batch instead of a whole answers file
    #[arg(long, conflicts_with = "answers")]
    batch_request: Option<PathBuf>,

    #[arg(long)]
    out: PathBuf,

    /// Five comma-separated weights: rouge1, edit distance, kendall, alignment, clip
    #[arg(long, value_delimiter = ',')]
    reward_weights: Option<Vec<f64>>,

    /// Do not zero the reward of invalid-format answers
    #[arg(long)]
    no_gate: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    answer_file: PathBuf,

    /// JSON object mapping image index to URL
    #[arg(long)]
    url_map: PathBuf,

    /// Retrieved image count (default: largest index in the URL map)
    #[arg(long)]
    image_count: Option<usize>,

    #[arg(long)]
    envelope: bool,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    corpus: PathBuf,

    #[arg(long)]
    sample_id: String,

    /// Template file (default: built-in template)
    #[arg(long)]
    template: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(f.error()));
            ExitCode::from(f.code())
        }
    }
}

/// Error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Evaluate(a) => evaluate(a),
        Command::Parse(a) => parse(a),
        Command::Correlate(a) => correlate(a),
        Command::Reward(a) => reward(a),
        Command::Render(a) => render(a),
        Command::Prompt(a) => prompt(a),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .data()
}

fn write_text(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body)
        .with_context(|| format!("cannot write {}", path.display()))
        .io()
}

fn read_corpus(path: &Path) -> Result<Vec<EvalSample>, Failure> {
    load_corpus(path)
        .with_context(|| format!("corpus {}", path.display()))
        .data()
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory values serialize");
    s.push('\n');
    s
}

impl RunArgs {
    fn eval_config(&self) -> EvalConfig {
        let mut cfg = EvalConfig {
            context_window_cap: self.context_window_cap.get(),
            ..EvalConfig::default()
        };
        if let Some(w) = self.workers {
            cfg.workers = w.get();
        }
        cfg
    }

    fn provider(&self, workers: usize) -> Result<Box<dyn ScoringProvider>, Failure> {
        if let Some(path) = &self.provider.mock_fixture {
            return Ok(Box::new(MockProvider::from_path(path)?));
        }
        let endpoint = match &self.provider.provider_endpoint {
            Some(e) => e.clone(),
            None => std::env::var(ENDPOINT_ENV).map_err(|_| {
                Failure::Data(anyhow!(
                    "no provider: pass --provider-endpoint, --mock-fixture or set {ENDPOINT_ENV}"
                ))
            })?,
        };
        let http = HttpProvider::new(
            &endpoint,
            workers,
            Duration::from_secs(self.provider_timeout_secs),
        )?;
        http.health()?;
        Ok(Box::new(http))
    }

    fn corpus(&self) -> Result<Vec<EvalSample>, Failure> {
        read_corpus(&self.corpus)
    }
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let samples = a.run.corpus()?;
    let answers = load_answers(&a.answers).data()?;
    let cfg = a.run.eval_config();
    let provider = a.run.provider(cfg.workers)?;
    let report = evaluate_corpus(&samples, &answers, provider.as_ref(), &cfg)?;
    let format = match a.format {
        Format::Json => ReportFormat::Json,
        Format::Csv => ReportFormat::Csv,
    };
    emit_report(&report, format, &a.out).io()?;
    log::info!(
        "scored {} samples ({} invalid format, {} with hallucinated images)",
        report.per_sample.len(),
        report.invalid_format_count,
        report.hallucination_count
    );
    Ok(())
}

#[derive(Serialize)]
struct ParseDump {
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    category: Option<Category>,
    #[serde(flatten)]
    parsed: ParsedAnswer,
    image_sequence: Vec<usize>,
    contexts: Vec<ImageContext>,
}

fn unwrap_envelope(
    raw: String,
    envelope: bool,
) -> Result<(String, Option<String>, Option<Category>), Failure> {
    if !envelope {
        return Ok((raw, None, None));
    }
    let env = extract_answer_envelope(&raw).data()?;
    Ok((env.answer, Some(env.reason), env.category))
}

fn parse(a: ParseArgs) -> Result<(), Failure> {
    let raw = read_text(&a.answer_file)?;
    let (answer, reason, category) = unwrap_envelope(raw, a.envelope)?;
    let parsed = parse_answer(&answer, a.image_count);
    let dump = ParseDump {
        reason,
        category,
        image_sequence: extract_image_sequence(&parsed, true),
        contexts: extract_contexts(&parsed, a.context_window_cap),
        parsed,
    };
    print!("{}", to_json(&dump));
    Ok(())
}

#[derive(Serialize)]
struct CorrelationOut {
    dimension: Dimension,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pearson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn correlate(a: CorrelateArgs) -> Result<(), Failure> {
    let raw = read_text(&a.report)?;
    let report: CorpusReport = serde_json::from_str(&raw)
        .with_context(|| format!("{} is not a JSON report", a.report.display()))
        .data()?;
    let human = load_human_scores(&a.human).data()?;
    let human: HashMap<_, _> = human.into_iter().map(|h| (h.id.clone(), h)).collect();

    let rows: Vec<CorrelationOut> = correlate_with_human(&report, &human)
        .into_iter()
        .map(|row| {
            let (pearson, spearman, error) = match row.result {
                Ok(c) => (Some(c.pearson), Some(c.spearman), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            CorrelationOut {
                dimension: row.dimension,
                n: row.n,
                pearson,
                spearman,
                error,
            }
        })
        .collect();

    let mut stdout = std::io::stdout().lock();
    let mut table = format!(
        "{:<14} {:>5} {:>9} {:>9}\n",
        "dimension", "n", "pearson", "spearman"
    );
    for r in &rows {
        let dim = serde_json::to_value(r.dimension).expect("enum serializes");
        let dim = dim.as_str().unwrap_or_default();
        match (&r.pearson, &r.spearman, &r.error) {
            (Some(p), Some(s), _) => {
                table.push_str(&format!("{dim:<14} {:>5} {p:>9.4} {s:>9.4}\n", r.n))
            }
            (_, _, e) => table.push_str(&format!(
                "{dim:<14} {:>5} {}\n",
                r.n,
                e.as_deref().unwrap_or("undefined")
            )),
        }
    }
    stdout.write_all(table.as_bytes()).io()?;
    if let Some(out) = &a.out {
        write_text(out, &to_json(&rows))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RewardLine<'a> {
    sample_id: &'a str,
    reward: f64,
}

fn reward(a: RewardArgs) -> Result<(), Failure> {
    let config = match &a.reward_weights {
        None => RewardConfig::new(RewardConfig::default().weights(), !a.no_gate)?,
        Some(w) => {
            let w: [f64; 5] = w.as_slice().try_into().map_err(|_| {
                Failure::Data(anyhow!(
                    "--reward-weights needs exactly 5 values, got {}",
                    w.len()
                ))
            })?;
            RewardConfig::new(w, !a.no_gate)?
        }
    };
    let samples = a.run.corpus()?;
    let eval = a.run.eval_config();
    let provider = a.run.provider(eval.workers)?;

    if let Some(req_path) = &a.batch_request {
        let raw = read_text(req_path)?;
        let request: BatchRewardRequest = serde_json::from_str(&raw)
            .with_context(|| format!("{} is not a batch reward request", req_path.display()))
            .data()?;
        let corpus: HashMap<String, EvalSample> =
            samples.into_iter().map(|s| (s.id.clone(), s)).collect();
        let response = handle_batch(&corpus, &request, provider.as_ref(), &config, &eval)?;
        return write_text(
            &a.out,
            &serde_json::to_string(&response).expect("rewards serialize"),
        );
    }

    let answers_path = a
        .answers
        .as_ref()
        .expect("clap requires --answers without --batch-request");
    let answers: Vec<AnswerRecord> = load_answers(answers_path).data()?;
    let report = evaluate_corpus(&samples, &answers, provider.as_ref(), &eval)?;
    let mut body = String::new();
    for r in &report.per_sample {
        let line = RewardLine {
            sample_id: &r.sample_id,
            reward: reward_from_report(r, &config),
        };
        body.push_str(&serde_json::to_string(&line).expect("reward line serializes"));
        body.push('\n');
    }
    write_text(&a.out, &body)
}

fn render(a: RenderArgs) -> Result<(), Failure> {
    let raw = read_text(&a.answer_file)?;
    let (answer, _, _) = unwrap_envelope(raw, a.envelope)?;
    let map_raw = read_text(&a.url_map)?;
    let url_map: HashMap<usize, String> = serde_json::from_str(&map_raw)
        .with_context(|| format!("{} must map image indices to URLs", a.url_map.display()))
        .data()?;
    let image_count = a
        .image_count
        .unwrap_or_else(|| url_map.keys().copied().max().unwrap_or(0));
    let parsed = parse_answer(&answer, image_count);
    if parsed.flags.invalid_format {
        log::warn!("answer has malformed image placeholders; they are left as-is");
    }
    let rendered = render_with_urls(&parsed, &url_map).data()?;
    match &a.out {
        Some(out) => write_text(out, &rendered),
        None => std::io::stdout().lock().write_all(rendered.as_bytes()).io(),
    }
}

fn prompt(a: PromptArgs) -> Result<(), Failure> {
    let samples = read_corpus(&a.corpus)?;
    let sample = samples
        .iter()
        .find(|s| s.id == a.sample_id)
        .ok_or_else(|| {
            Failure::Data(anyhow!(
                "sample {:?} not found in {}",
                a.sample_id,
                a.corpus.display()
            ))
        })?;
    let template = match &a.template {
        Some(path) => PromptTemplate::from_file(path).data()?,
        None => PromptTemplate::default(),
    };
    let text = build_prompt(sample, &template).data()?;
    std::io::stdout().lock().write_all(text.as_bytes()).io()
}
