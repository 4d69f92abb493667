//! Command implementations behind the `inkmark` binary.
//!
//! Each `cmd_*` function is usable from library code; the argument structs
//! double as clap argument groups. Every command is deterministic given its
//! inputs and seed, and writes plain JSON, JSONL or CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    enumerate_partitions, mcq_rankings, probability_of_random_collapse, write_length_csv,
    write_partitions_csv, write_stability_csv, LengthBucket, TopKMatch, COLLAPSE_TOLERANCE,
};
use crate::bundled::{bundled, MCQ_BUCKET_EDGES};
use crate::calibrate::{calibrate, CalibrationOptions, CalibrationResult, Intensity, GAMMA_GRID};
use crate::corpus::{read_documents, split_corpus, TokenSequence, Vocabulary};
use crate::detect::{detect, Detector, Roc, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::lm::{train_ngram, LogitSource, NGramConfig, NGramModel, RemoteConfig, RemoteLogits, TOKEN_ENV};
use crate::taskeval::{evaluate_task, random_baseline, Category, Metric, Prediction, ScoreReport, Task};
use crate::watermark::{
    watermarked_generate, GenerateOptions, Scheme, Transcript, WatermarkSpec, Watermarker,
};

/// Where next-token logits come from: a local model file or a remote
/// endpoint (which also needs the matching vocabulary).
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Trained n-gram model file.
    #[arg(long)]
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Remote logits endpoint base URL.
    #[arg(long, conflicts_with = "model")]
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Vocabulary JSON shared with the remote endpoint.
    #[arg(long)]
    #[serde(default)]
    pub vocab: Option<PathBuf>,
}

/// A loaded logit source and its vocabulary.
pub struct Backend {
    pub model: Box<dyn LogitSource>,
    pub vocab: Vocabulary,
}

impl ModelArgs {
    pub fn validate(&self) -> Result<()> {
        match (&self.model, &self.endpoint) {
            (Some(_), None) => Ok(()),
            (None, Some(_)) if self.vocab.is_some() => Ok(()),
            (None, Some(_)) => Err(Error::InvalidParameter("--endpoint needs --vocab".into())),
            _ => Err(Error::InvalidParameter(
                "exactly one of --model and --endpoint must be given".into(),
            )),
        }
    }

    pub fn load(&self) -> Result<Backend> {
        self.validate()?;
        if let Some(path) = &self.model {
            let m = NGramModel::load(path)?;
            let vocab = m.vocab().clone();
            return Ok(Backend {
                model: Box::new(m),
                vocab,
            });
        }
        let endpoint = self.endpoint.as_deref().expect("validated");
        let vocab = Vocabulary::load(self.vocab.as_deref().expect("validated"))?;
        let remote = RemoteLogits::new(endpoint, &vocab, RemoteConfig::default())
            .with_token(std::env::var(TOKEN_ENV).ok());
        Ok(Backend {
            model: Box::new(remote),
            vocab,
        })
    }
}

/// Reads documents from every path; no paths means the bundled corpus.
pub fn load_documents(paths: &[PathBuf]) -> Result<Vec<String>> {
    if paths.is_empty() {
        return Ok(bundled().documents);
    }
    let mut docs = Vec::new();
    for p in paths {
        docs.extend(read_documents(p)?);
    }
    Ok(docs)
}

/// Reads task files; no paths means the bundled tasks.
pub fn load_tasks(paths: &[PathBuf]) -> Result<Vec<Task>> {
    if paths.is_empty() {
        return Ok(bundled().tasks);
    }
    paths.iter().map(|p| Task::load(p)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path, e))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Corpus files (.txt one document per line, or .jsonl with "text");
    /// the bundled corpus when omitted.
    #[arg(long = "corpus", num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the vocabulary JSON here.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<NGramModel> {
    let docs = load_documents(&args.corpus)?;
    let vocab = Vocabulary::build(&docs, args.min_count)?;
    let encoded: Vec<TokenSequence> = docs.iter().map(|d| vocab.encode_document(d)).collect();
    let model = train_ngram(&vocab, &encoded, NGramConfig::with_order(args.order))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    model.save(&args.out)?;
    if let Some(v) = &args.vocab_out {
        vocab.save(v)?;
    }
    log::info!(
        "trained order-{} model over {} tokens of vocabulary",
        args.order,
        vocab.len()
    );
    Ok(model)
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "corpus", num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub scheme: Scheme,
    #[arg(long, default_value = "moderate")]
    pub intensity: Intensity,
    #[arg(long, value_delimiter = ',', default_values_t = GAMMA_GRID.to_vec())]
    pub gamma_grid: Vec<f64>,
    /// Number of calibration prompts.
    #[arg(long, default_value_t = 200)]
    pub prefixes: usize,
    /// Number of held-out perplexity snippets.
    #[arg(long, default_value_t = 100)]
    pub snippets: usize,
    #[arg(long, default_value_t = 8)]
    pub prefix_len: usize,
    #[arg(long, default_value_t = 64)]
    pub snippet_len: usize,
    #[arg(long, default_value_t = 0)]
    pub key: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn run_calibration(backend: &Backend, docs: &[String], args: &CalibrateArgs) -> Result<CalibrationResult> {
    let split = split_corpus(
        docs,
        &backend.vocab,
        args.prefixes,
        args.snippets,
        derive_seed(args.seed, "split"),
    )?
    .truncate_prefixes(args.prefix_len)
    .truncate_snippets(args.snippet_len);
    let options = CalibrationOptions {
        seed: derive_seed(args.seed, "calibrate"),
        ..CalibrationOptions::default()
    };
    calibrate(
        backend.model.as_ref(),
        args.scheme,
        args.key,
        args.intensity,
        &args.gamma_grid,
        &split.calibration_prefixes,
        &split.perplexity_snippets,
        &options,
    )
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<CalibrationResult> {
    let backend = args.model.load()?;
    let docs = load_documents(&args.corpus)?;
    let result = run_calibration(&backend, &docs, args)?;
    write_json(&args.out, &result)?;
    Ok(result)
}

/// Reads a spec from either a bare WatermarkSpec JSON or a calibration
/// result.
pub fn read_spec(path: &Path) -> Result<WatermarkSpec> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("chosen").is_some() {
        let r: CalibrationResult = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
        return Ok(r.chosen_spec());
    }
    let spec: WatermarkSpec = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Watermark spec or calibration result; unwatermarked when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Prompt file, one prompt per line (or .jsonl with "text").
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Without --prompts, take this many corpus documents as prompts.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Tokens kept from each prompt (0 keeps all).
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 50)]
    pub max_tokens: usize,
    /// Keep generating past end-of-text until --max-tokens.
    #[arg(long)]
    pub fixed_length: bool,
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<Vec<Transcript>> {
    let backend = args.model.load()?;
    let spec = args.spec.as_deref().map(read_spec).transpose()?;
    let watermark = spec
        .map(|s| Watermarker::new(s, backend.vocab.len()))
        .transpose()?;
    let docs = match &args.prompts {
        Some(p) => read_documents(p)?,
        None => {
            let docs = load_documents(&[])?;
            split_corpus(
                &docs,
                &backend.vocab,
                args.count,
                0,
                derive_seed(args.seed, "prompts"),
            )?
            .calibration_ids
            .iter()
            .map(|&i| docs[i].clone())
            .collect()
        }
    };
    let prompts: Vec<TokenSequence> = docs
        .iter()
        .map(|d| {
            let mut p = backend.vocab.encode_prompt(d).into_inner();
            if args.prompt_len > 0 {
                p.truncate(args.prompt_len);
            }
            p.into()
        })
        .collect();
    use rayon::prelude::*;
    let transcripts = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let seed = crate::hashing::keyed_hash(args.seed, i as u64);
            let mut opts = if args.greedy {
                GenerateOptions::greedy(args.max_tokens)
            } else {
                GenerateOptions::sampled(args.max_tokens, seed)
            };
            if args.fixed_length {
                opts = opts.fixed_length();
            }
            let g = watermarked_generate(backend.model.as_ref(), watermark.as_ref(), p, &opts)?;
            Ok(Transcript {
                prompt_ids: p.to_vec(),
                output_ids: g.output().to_vec(),
                spec,
                seed: (!args.greedy).then_some(seed),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(&args.out, &transcripts)?;
    Ok(transcripts)
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    /// Needed for the entropy-weighted detector (EWD specs).
    #[command(flatten)]
    pub model: ModelArgs,
    /// Transcript JSONL to score.
    #[arg(long)]
    pub transcripts: PathBuf,
    /// Unwatermarked transcripts used as ROC negatives.
    #[arg(long)]
    pub negatives: Option<PathBuf>,
    /// Spec to test for; defaults to the spec stored in each transcript.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub roc: Option<PathBuf>,
}

/// One line of the detect output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub index: usize,
    pub spec: WatermarkSpec,
    #[serde(flatten)]
    pub report: crate::detect::DetectionReport,
}

pub fn cmd_detect(args: &DetectArgs) -> Result<Vec<DetectionRecord>> {
    let fixed = args.spec.as_deref().map(read_spec).transpose()?;
    let transcripts: Vec<Transcript> = read_jsonl(&args.transcripts)?;
    let negatives: Vec<Transcript> = match &args.negatives {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let needs_model = fixed.map_or_else(
        || {
            transcripts
                .iter()
                .any(|t| t.spec.is_some_and(|s| s.scheme == Scheme::Ewd))
        },
        |s| s.scheme == Scheme::Ewd,
    );
    let backend = if needs_model || args.model.model.is_some() || args.model.endpoint.is_some() {
        Some(args.model.load()?)
    } else {
        None
    };
    let vocab_size = |spec: &WatermarkSpec| -> Result<usize> {
        match &backend {
            Some(b) => Ok(b.vocab.len()),
            None => Err(Error::InvalidParameter(format!(
                "detecting {} needs --model or --endpoint for the vocabulary size",
                spec.scheme
            ))),
        }
    };
    let mut cache: BTreeMap<String, Watermarker> = BTreeMap::new();
    let mut score = |t: &Transcript, spec: WatermarkSpec| -> Result<crate::detect::DetectionReport> {
        let key = serde_json::to_string(&spec).expect("spec serializes");
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), Watermarker::new(spec, vocab_size(&spec)?)?);
        }
        let w = &cache[&key];
        detect(
            &t.full_sequence(),
            t.prompt_ids.len(),
            w,
            Detector::for_scheme(spec.scheme),
            backend.as_ref().map(|b| b.model.as_ref()),
            args.threshold,
        )
    };
    let mut records = Vec::new();
    for (index, t) in transcripts.iter().enumerate() {
        let spec = fixed.or(t.spec).ok_or_else(|| {
            Error::InvalidParameter(format!("transcript {index} has no spec and --spec was not given"))
        })?;
        records.push(DetectionRecord {
            index,
            spec,
            report: score(t, spec)?,
        });
    }
    write_jsonl(&args.out, &records)?;
    if let Some(roc_path) = &args.roc {
        let spec = fixed
            .or_else(|| records.first().map(|r| r.spec))
            .ok_or(Error::EmptySample("transcripts"))?;
        let neg = negatives
            .iter()
            .map(|t| score(t, spec).map(|r| r.z))
            .collect::<Result<Vec<_>>>()?;
        let pos: Vec<f64> = records.iter().map(|r| r.report.z).collect();
        let roc = Roc::from_scores(&pos, &neg)?;
        roc.write_csv(create_file(roc_path)?)
            .map_err(|e| Error::io(roc_path, e))?;
    }
    Ok(records)
}

/// Scores of one task under one watermark, with the unwatermarked
/// reference needed to normalize them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: String,
    pub category: Category,
    pub scheme: Option<Scheme>,
    pub intensity: Option<Intensity>,
    pub spec: Option<WatermarkSpec>,
    pub metric_name: Metric,
    pub raw: f64,
    pub unwatermarked_raw: f64,
    pub random_baseline: f64,
    pub normalized: Option<f64>,
    pub predictions: Vec<Prediction>,
}

fn evaluate_pair(
    backend: &Backend,
    task: &Task,
    spec: Option<WatermarkSpec>,
    intensity: Option<Intensity>,
    unwatermarked_raw: Option<f64>,
) -> Result<EvaluationReport> {
    let model = backend.model.as_ref();
    let baseline = random_baseline(&task.examples)?;
    let unwm = match unwatermarked_raw {
        Some(r) => r,
        None => evaluate_task(model, None, &backend.vocab, task)?.raw,
    };
    let run = match spec {
        Some(s) => {
            let w = Watermarker::new(s, backend.vocab.len())?;
            evaluate_task(model, Some(&w), &backend.vocab, task)?
        }
        None => evaluate_task(model, None, &backend.vocab, task)?,
    };
    let score = ScoreReport::new(run.metric_name, run.raw, unwm, baseline);
    Ok(EvaluationReport {
        task: task.name.clone(),
        category: run.category,
        scheme: spec.map(|s| s.scheme),
        intensity: spec.and(intensity),
        spec,
        metric_name: run.metric_name,
        raw: run.raw,
        unwatermarked_raw: unwm,
        random_baseline: baseline,
        normalized: score.normalized,
        predictions: run.predictions,
    })
}

fn report_file_name(r: &EvaluationReport) -> String {
    let label = r.scheme.map_or("none", |s| s.name());
    format!("{label}__{}.json", r.task)
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Task JSONL files; the bundled tasks when omitted.
    #[arg(long = "task", num_args = 1..)]
    pub tasks: Vec<PathBuf>,
    /// Watermark spec or calibration result; unwatermarked when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Intensity label recorded in the reports.
    #[arg(long)]
    pub intensity: Option<Intensity>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<EvaluationReport>> {
    let backend = args.model.load()?;
    let spec = args.spec.as_deref().map(read_spec).transpose()?;
    let tasks = load_tasks(&args.tasks)?;
    let mut reports = Vec::new();
    for task in &tasks {
        let r = evaluate_pair(&backend, task, spec, args.intensity, None)?;
        write_json(&args.out.join(report_file_name(&r)), &r)?;
        reports.push(r);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnalysisSettings {
    #[arg(long, default_value_t = 2.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.25)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub key: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3])]
    pub k: Vec<usize>,
    /// Bucket edges (mean words per option) for the by-length table.
    #[arg(long, value_delimiter = ',', default_values_t = MCQ_BUCKET_EDGES.to_vec())]
    pub length_edges: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "task", num_args = 1..)]
    pub tasks: Vec<PathBuf>,
    #[command(flatten)]
    pub settings: AnalysisSettings,
    #[arg(long)]
    pub out: PathBuf,
}

/// Headline numbers of one analyzed task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub task: String,
    pub category: Category,
    pub delta: f64,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unwatermarked_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collapse_probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_stability: Option<f64>,
}

fn analyze_tasks(
    backend: &Backend,
    tasks: &[Task],
    s: &AnalysisSettings,
    out: &Path,
) -> Result<Vec<AnalysisSummary>> {
    let model = backend.model.as_ref();
    let mut summaries = Vec::new();
    for task in tasks {
        let dir = out.join(&task.name);
        let summary = match task.category()? {
            Category::Cls => {
                let e = enumerate_partitions(model, &backend.vocab, task, s.delta, s.gamma)?;
                let path = dir.join("partitions.csv");
                write_partitions_csv(&e.outcomes, create_file(&path)?)
                    .map_err(|err| Error::io(&path, err))?;
                AnalysisSummary {
                    task: task.name.clone(),
                    category: Category::Cls,
                    delta: s.delta,
                    gamma: s.gamma,
                    unwatermarked_accuracy: Some(e.unwatermarked_accuracy),
                    expected_accuracy: Some(e.expected_accuracy),
                    worst_accuracy: Some(e.worst_accuracy),
                    collapse_probability: Some(probability_of_random_collapse(
                        &e.outcomes,
                        e.random_baseline,
                        COLLAPSE_TOLERANCE,
                    )?),
                    top1_stability: None,
                }
            }
            Category::Mcq => {
                let spec = WatermarkSpec::kgw(s.gamma, s.delta, s.key)?;
                let rankings = mcq_rankings(model, &backend.vocab, &spec, task)?;
                let min_choices = task.examples.iter().map(|e| e.choices.len()).min().unwrap_or(0);
                let ks: Vec<usize> = s.k.iter().copied().filter(|&k| k <= min_choices).collect();
                let rows = rankings.stability(&ks)?;
                let path = dir.join("stability.csv");
                write_stability_csv(&rows, create_file(&path)?).map_err(|err| Error::io(&path, err))?;
                let buckets = LengthBucket::from_edges(&s.length_edges);
                let by_len = rankings.stability_by_length(&buckets, 1, TopKMatch::Order)?;
                let path = dir.join("stability_by_length.csv");
                write_length_csv(&by_len, create_file(&path)?).map_err(|err| Error::io(&path, err))?;
                AnalysisSummary {
                    task: task.name.clone(),
                    category: Category::Mcq,
                    delta: s.delta,
                    gamma: s.gamma,
                    unwatermarked_accuracy: None,
                    expected_accuracy: None,
                    worst_accuracy: None,
                    collapse_probability: None,
                    top1_stability: rows
                        .iter()
                        .find(|r| r.k == 1 && r.matching == TopKMatch::Order)
                        .map(|r| r.proportion_unchanged),
                }
            }
            _ => continue,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<Vec<AnalysisSummary>> {
    let backend = args.model.load()?;
    let tasks = load_tasks(&args.tasks)?;
    analyze_tasks(&backend, &tasks, &args.settings, &args.out)
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directory holding evaluation reports (searched recursively).
    #[arg(long)]
    pub run: PathBuf,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scheme: String,
    pub intensity: String,
    pub task: String,
    pub metric: Metric,
    pub raw: f64,
    pub baseline: f64,
    pub normalized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rows: Vec<ReportRow>,
    pub average_raw: f64,
    pub average_baseline: f64,
    pub average_normalized: Option<f64>,
    pub markdown: String,
    pub csv: String,
}

fn collect_reports(dir: &Path, out: &mut Vec<EvaluationReport>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "json") {
            if let Ok(r) = read_json::<EvaluationReport>(&p) {
                out.push(r);
            }
        }
    }
    Ok(())
}

fn scheme_rank(s: &str) -> usize {
    ["none", "KGW", "EWD", "SIR"]
        .iter()
        .position(|x| *x == s)
        .unwrap_or(4)
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

/// Builds the summary table from evaluation reports.
pub fn summarize(reports: &[EvaluationReport]) -> Option<Summary> {
    if reports.is_empty() {
        return None;
    }
    let mut rows: Vec<ReportRow> = reports
        .iter()
        .map(|r| ReportRow {
            scheme: r.scheme.map_or("none".into(), |s| s.name().into()),
            intensity: r.intensity.map_or("-".into(), |i| i.to_string()),
            task: r.task.clone(),
            metric: r.metric_name,
            raw: r.raw,
            baseline: r.random_baseline,
            normalized: r.normalized,
        })
        .collect();
    rows.sort_by(|a, b| {
        (scheme_rank(&a.scheme), &a.scheme, &a.intensity, &a.task).cmp(&(
            scheme_rank(&b.scheme),
            &b.scheme,
            &b.intensity,
            &b.task,
        ))
    });
    let n = rows.len() as f64;
    let average_raw = rows.iter().map(|r| r.raw).sum::<f64>() / n;
    let average_baseline = rows.iter().map(|r| r.baseline).sum::<f64>() / n;
    let normalized: Vec<f64> = rows.iter().filter_map(|r| r.normalized).collect();
    let average_normalized =
        (!normalized.is_empty()).then(|| normalized.iter().sum::<f64>() / normalized.len() as f64);

    let mut md = String::from("| scheme | intensity | task | metric | raw | baseline | normalized |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    let mut csv = String::from("scheme,intensity,task,metric,raw,baseline,normalized\n");
    let metric_name = |m: Metric| {
        serde_json::to_value(m)
            .expect("metric serializes")
            .as_str()
            .unwrap_or("")
            .to_string()
    };
    for r in &rows {
        let m = metric_name(r.metric);
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {} |",
            r.scheme,
            r.intensity,
            r.task,
            m,
            r.raw,
            r.baseline,
            fmt_cell(r.normalized)
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.scheme,
            r.intensity,
            r.task,
            m,
            r.raw,
            r.baseline,
            r.normalized.map(|x| x.to_string()).unwrap_or_default()
        );
    }
    let _ = writeln!(
        md,
        "| **average** | | | | {:.4} | {:.4} | {} |",
        average_raw,
        average_baseline,
        fmt_cell(average_normalized)
    );
    let _ = writeln!(
        csv,
        "average,,,,{},{},{}",
        average_raw,
        average_baseline,
        average_normalized.map(|x| x.to_string()).unwrap_or_default()
    );
    Some(Summary {
        rows,
        average_raw,
        average_baseline,
        average_normalized,
        markdown: md,
        csv,
    })
}

/// Writes `report.md` and `report.csv` into the run directory.
pub fn cmd_report(args: &ReportArgs) -> Result<Summary> {
    let mut reports = Vec::new();
    collect_reports(&args.run, &mut reports)?;
    let summary = summarize(&reports).ok_or_else(|| Error::EmptyRunDir(args.run.clone()))?;
    let md = args.run.join("report.md");
    fs::write(&md, &summary.markdown).map_err(|e| Error::io(&md, e))?;
    let csv = args.run.join("report.csv");
    fs::write(&csv, &summary.csv).map_err(|e| Error::io(&csv, e))?;
    Ok(summary)
}

/// Configuration of a full run, read from JSON with flag overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model file; trained into `out_dir/model.json.gz` when neither this
    /// nor `endpoint` is set.
    pub model: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub vocab: Option<PathBuf>,
    pub corpus: Vec<PathBuf>,
    pub tasks: Vec<PathBuf>,
    pub seed: u64,
    /// Upper bound on worker threads; all cores when unset.
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
    pub order: usize,
    pub min_count: usize,
    pub intensity: Intensity,
    pub schemes: Vec<Scheme>,
    pub gamma_grid: Vec<f64>,
    pub calibration_prefixes: usize,
    pub perplexity_snippets: usize,
    pub prefix_len: usize,
    pub snippet_len: usize,
    pub k_values: Vec<usize>,
    pub length_edges: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            endpoint: None,
            vocab: None,
            corpus: Vec::new(),
            tasks: Vec::new(),
            seed: 0,
            workers: None,
            out_dir: PathBuf::from("run"),
            order: 3,
            min_count: 1,
            intensity: Intensity::Moderate,
            schemes: Scheme::ALL.to_vec(),
            gamma_grid: GAMMA_GRID.to_vec(),
            calibration_prefixes: 200,
            perplexity_snippets: 100,
            prefix_len: 8,
            snippet_len: 64,
            k_values: vec![1, 2, 3],
            length_edges: MCQ_BUCKET_EDGES.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Model settings with the default local model path filled in.
    pub fn model_args(&self) -> Result<ModelArgs> {
        let args = match (&self.model, &self.endpoint) {
            (None, None) => ModelArgs {
                model: Some(self.out_dir.join("model.json.gz")),
                endpoint: None,
                vocab: None,
            },
            _ => ModelArgs {
                model: self.model.clone(),
                endpoint: self.endpoint.clone(),
                vocab: self.vocab.clone(),
            },
        };
        args.validate()?;
        Ok(args)
    }
}

/// Pipeline stages in execution order.
pub const STAGES: [&str; 5] = ["train", "calibrate", "evaluate", "analyze", "report"];

#[derive(Debug, Serialize, Deserialize)]
struct StageStamp {
    stage: String,
    input_hash: String,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("value serializes")
}

struct StageRunner<'a> {
    root: &'a Path,
    stop_after: Option<&'a str>,
}

impl StageRunner<'_> {
    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }

    /// Runs `body` unless a stamp with the same input hash already exists.
    /// Returns false when the run should stop after this stage.
    fn run(&self, stage: &'static str, input_hash: &str, body: impl FnOnce() -> Result<()>) -> Result<bool> {
        let stamp = self.stamp_path(stage);
        let fresh = read_json::<StageStamp>(&stamp).is_ok_and(|s| s.input_hash == input_hash);
        if fresh {
            log::info!("stage {stage}: up to date");
        } else {
            log::info!("stage {stage}: running");
            let _ = fs::remove_file(&stamp);
            body().map_err(|e| e.in_stage(stage))?;
            write_json(
                &stamp,
                &StageStamp {
                    stage: stage.into(),
                    input_hash: input_hash.into(),
                },
            )?;
        }
        Ok(self.stop_after != Some(stage))
    }
}

/// Everything a finished (or stopped) pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub completed: Vec<&'static str>,
    pub summary: Option<Summary>,
}

/// Train or load, calibrate each scheme, evaluate every task with and
/// without each calibrated watermark, analyze the CLS/MCQ tasks, and write
/// the report. Stage results are stamped with a hash of their inputs, so a
/// rerun skips stages whose inputs did not change. `stop_after` ends the
/// run early after the named stage.
pub fn cmd_pipeline(config: &RunConfig, stop_after: Option<&str>) -> Result<PipelineOutcome> {
    if let Some(s) = stop_after {
        if !STAGES.contains(&s) {
            return Err(Error::InvalidParameter(format!("unknown stage {s:?}")));
        }
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| run_pipeline(config, stop_after))
}

fn run_pipeline(config: &RunConfig, stop_after: Option<&str>) -> Result<PipelineOutcome> {
    let root = config.out_dir.as_path();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let model_args = config.model_args()?;
    let runner = StageRunner { root, stop_after };
    let mut completed = Vec::new();

    let docs = load_documents(&config.corpus)?;
    let tasks = load_tasks(&config.tasks)?;
    let docs_hash = sha256_hex(&docs.iter().map(|d| d.as_bytes()).collect::<Vec<_>>());
    let tasks_hash = sha256_hex(&[&json_bytes(&tasks)]);

    // train
    let train_hash = sha256_hex(&[
        b"train",
        docs_hash.as_bytes(),
        &json_bytes(&(
            config.order,
            config.min_count,
            &model_args.model,
            &model_args.endpoint,
        )),
    ]);
    let trains_locally = config.model.is_none() && config.endpoint.is_none();
    let go = runner.run("train", &train_hash, || {
        if trains_locally {
            cmd_train(&TrainArgs {
                corpus: config.corpus.clone(),
                order: config.order,
                min_count: config.min_count,
                out: model_args.model.clone().expect("local model path"),
                vocab_out: Some(root.join("vocab.json")),
            })?;
        }
        Ok(())
    })?;
    completed.push("train");
    if !go {
        return Ok(PipelineOutcome {
            completed,
            summary: None,
        });
    }
    let backend = model_args.load().map_err(|e| e.in_stage("train"))?;

    // calibrate
    let calib_dir = root.join("calibration");
    let calib_hash = sha256_hex(&[
        b"calibrate",
        train_hash.as_bytes(),
        backend.vocab.hash().as_bytes(),
        &json_bytes(&(
            config.seed,
            config.intensity,
            &config.schemes,
            &config.gamma_grid,
            config.calibration_prefixes,
            config.perplexity_snippets,
            config.prefix_len,
            config.snippet_len,
        )),
    ]);
    let go = runner.run("calibrate", &calib_hash, || {
        for &scheme in &config.schemes {
            let args = CalibrateArgs {
                model: model_args.clone(),
                corpus: config.corpus.clone(),
                scheme,
                intensity: config.intensity,
                gamma_grid: config.gamma_grid.clone(),
                prefixes: config.calibration_prefixes,
                snippets: config.perplexity_snippets,
                prefix_len: config.prefix_len,
                snippet_len: config.snippet_len,
                key: derive_seed(config.seed, &format!("key/{scheme}")),
                seed: config.seed,
                out: calib_dir.join(format!("{scheme}.json")),
            };
            let result = run_calibration(&backend, &docs, &args)?;
            log::info!(
                "{scheme}: gamma={} delta={:.3} perplexity={:.3}",
                result.chosen.gamma,
                result.chosen.delta,
                result.chosen.perplexity
            );
            write_json(&args.out, &result)?;
        }
        Ok(())
    })?;
    completed.push("calibrate");
    let results: Vec<CalibrationResult> = config
        .schemes
        .iter()
        .map(|s| read_json(&calib_dir.join(format!("{s}.json"))))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("calibrate"))?;
    if !go {
        return Ok(PipelineOutcome {
            completed,
            summary: None,
        });
    }

    // evaluate
    let eval_dir = root.join("evaluations");
    let results_hash = sha256_hex(&[&json_bytes(&results)]);
    let eval_hash = sha256_hex(&[
        b"evaluate",
        calib_hash.as_bytes(),
        tasks_hash.as_bytes(),
        results_hash.as_bytes(),
    ]);
    let go = runner.run("evaluate", &eval_hash, || {
        if eval_dir.exists() {
            fs::remove_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
        }
        for task in &tasks {
            let unwm = evaluate_pair(&backend, task, None, None, None)?;
            write_json(&root.join("baseline").join(report_file_name(&unwm)), &unwm)?;
            for r in &results {
                let report = evaluate_pair(
                    &backend,
                    task,
                    Some(r.chosen_spec()),
                    Some(config.intensity),
                    Some(unwm.raw),
                )?;
                write_json(&eval_dir.join(report_file_name(&report)), &report)?;
            }
        }
        Ok(())
    })?;
    completed.push("evaluate");
    if !go {
        return Ok(PipelineOutcome {
            completed,
            summary: None,
        });
    }

    // analyze, at the calibrated KGW-family strength
    let lexical = results
        .iter()
        .find(|r| r.scheme.is_lexical())
        .map(|r| r.chosen_spec());
    let settings = AnalysisSettings {
        delta: lexical.map_or(2.0, |s| s.delta),
        gamma: lexical.map_or(0.25, |s| s.gamma),
        key: lexical.map_or(config.seed, |s| s.key),
        k: config.k_values.clone(),
        length_edges: config.length_edges.clone(),
    };
    let analyze_hash = sha256_hex(&[
        b"analyze",
        calib_hash.as_bytes(),
        tasks_hash.as_bytes(),
        &json_bytes(&settings),
    ]);
    let go = runner.run("analyze", &analyze_hash, || {
        let summaries = analyze_tasks(&backend, &tasks, &settings, &root.join("analysis"))?;
        write_json(&root.join("analysis").join("summary.json"), &summaries)
    })?;
    completed.push("analyze");
    if !go {
        return Ok(PipelineOutcome {
            completed,
            summary: None,
        });
    }

    // report
    let report_hash = sha256_hex(&[b"report", eval_hash.as_bytes()]);
    let mut summary = None;
    runner.run("report", &report_hash, || {
        summary = Some(cmd_report(&ReportArgs {
            run: eval_dir.clone(),
        })?);
        for name in ["report.md", "report.csv"] {
            fs::copy(eval_dir.join(name), root.join(name)).map_err(|e| Error::io(root.join(name), e))?;
        }
        Ok(())
    })?;
    completed.push("report");
    let summary = match summary {
        Some(s) => Some(s),
        None => {
            let mut reports = Vec::new();
            collect_reports(&eval_dir, &mut reports)?;
            summarize(&reports)
        }
    };
    Ok(PipelineOutcome { completed, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(scheme: Option<Scheme>, task: &str, raw: f64, normalized: Option<f64>) -> EvaluationReport {
        EvaluationReport {
            task: task.into(),
            category: Category::Cls,
            scheme,
            intensity: scheme.map(|_| Intensity::Moderate),
            spec: None,
            metric_name: Metric::Accuracy,
            raw,
            unwatermarked_raw: 0.9,
            random_baseline: 0.5,
            normalized,
            predictions: vec![],
        }
    }

    #[test]
    fn one_report_gives_one_row_and_average() {
        let s = summarize(&[report(Some(Scheme::Kgw), "a", 0.8, Some(0.75))]).unwrap();
        assert_eq!(s.rows.len(), 1);
        assert_eq!(s.markdown.lines().count(), 4);
        assert!(s.csv.lines().last().unwrap().starts_with("average,"));
    }

    #[test]
    fn rows_grouped_by_scheme_and_averages_match() {
        let reports = vec![
            report(Some(Scheme::Sir), "b", 0.6, Some(0.25)),
            report(Some(Scheme::Kgw), "b", 0.7, Some(0.5)),
            report(Some(Scheme::Kgw), "a", 0.8, Some(0.75)),
            report(Some(Scheme::Ewd), "a", 0.9, None),
        ];
        let s = summarize(&reports).unwrap();
        let order: Vec<(&str, &str)> = s
            .rows
            .iter()
            .map(|r| (r.scheme.as_str(), r.task.as_str()))
            .collect();
        assert_eq!(order, [("KGW", "a"), ("KGW", "b"), ("EWD", "a"), ("SIR", "b")]);
        assert!((s.average_raw - 0.75).abs() < 1e-9);
        assert!((s.average_normalized.unwrap() - 0.5).abs() < 1e-9);
        let mut shuffled = reports.clone();
        shuffled.reverse();
        assert_eq!(summarize(&shuffled).unwrap().csv, s.csv);
    }

    #[test]
    fn model_args_need_exactly_one_source() {
        assert!(ModelArgs::default().validate().is_err());
        let both = ModelArgs {
            model: Some("m".into()),
            endpoint: Some("http://x".into()),
            vocab: Some("v".into()),
        };
        assert!(both.validate().is_err());
        let cfg = RunConfig::default();
        assert_eq!(
            cfg.model_args().unwrap().model.unwrap(),
            PathBuf::from("run/model.json.gz")
        );
    }

    #[test]
    fn empty_run_dir() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            cmd_report(&ReportArgs {
                run: dir.path().to_path_buf()
            }),
            Err(Error::EmptyRunDir(_))
        ));
    }
}
