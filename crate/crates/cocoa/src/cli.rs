//! `cocoa` command-line interface.
//!
//! Exit codes: 0 success, 1 finished with failed records, 2 configuration
//! or input error.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cocoa_core::loss::verify::run_suite;
use cocoa_core::metrics::{evaluate_run, round_half_up, EvalOptions, EvalReport, MetricMode};
use cocoa_core::synthesis::{synthesize, TrainingHyperparameters};
use cocoa_core::{PipelineRecord, Query, VariantId};
use serde::Serialize;

use crate::config::{RetrieverKind, RunConfig, FROZEN_CONFIG_FILE};
use crate::corpus::{ingest_corpus, Corpus, CorpusFormat};
use crate::export::{export_dataset, DatasetFormat, TrainingSample};
use crate::generator::{Gateway, Generator, MockGenerator, MockScript, OpenAiClient, RetryPolicy};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::pipeline::Pipeline;
use crate::retrieval::{build_index, open_local, save_index, RemoteRetriever, Retriever, INDEX_FILE};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const DEFAULT_SWEEP_KS: [usize; 6] = [1, 3, 5, 10, 15, 20];

#[derive(Debug, Parser)]
#[command(name = "cocoa", version, about = "Retrieval-augmented QA pipeline with internal/external knowledge induction")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a JSONL/TSV corpus into a passage store.
    Ingest(IngestArgs),
    /// Build the BM25 index for a passage store.
    Index(IndexArgs),
    /// Run one pipeline variant over a query set.
    Run(RunArgs),
    /// Score a records file.
    Eval(EvalArgs),
    /// Run and score one variant at several retrieval depths.
    SweepK(SweepArgs),
    /// Build SFT and DPO datasets.
    Synthesize(SynthesizeArgs),
    /// Check loss and gradient implementations on the toy model.
    VerifyLosses(VerifyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Tsv,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the input file extension.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long)]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Defaults to `<store>/bm25_index.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = cocoa_core::bm25::DEFAULT_K1)]
    pub k1: f64,
    #[arg(long, default_value_t = cocoa_core::bm25::DEFAULT_B)]
    pub b: f64,
}

/// Settings shared by every command that runs the pipeline. Flags override
/// values from `--config`.
#[derive(Debug, Args, Default)]
pub struct RunOverrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Corpus store for local BM25 retrieval.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Remote retrieval endpoint (switches the retriever to remote).
    #[arg(long)]
    pub retriever_endpoint: Option<String>,
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    #[arg(long)]
    pub mock_strict: bool,
    /// OpenAI-compatible generation endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub task_instruction: Option<String>,
    /// Omit timings so repeated runs produce identical files.
    #[arg(long)]
    pub canonical: bool,
    /// Run the two knowledge branches one after the other.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub variant: Option<VariantId>,
    #[command(flatten)]
    pub common: RunOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A records file, or a run directory containing records.jsonl.
    #[arg(long)]
    pub records: PathBuf,
    /// Defaults to the directory of the records file.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[arg(long, value_enum, default_value_t = MetricArg::Qa)]
    pub metric: MetricArg,
    /// Leave failed records out of the means instead of scoring them 0.
    #[arg(long)]
    pub exclude_failed: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Qa,
    Label,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub variant: Option<VariantId>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_KS)]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub common: RunOverrides,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Existing cocoa_zero records; runs the pipeline when omitted.
    #[arg(long, requires = "zero_shot_records")]
    pub cocoa_records: Option<PathBuf>,
    /// Existing zero_shot records for the same queries.
    #[arg(long, requires = "cocoa_records")]
    pub zero_shot_records: Option<PathBuf>,
    #[command(flatten)]
    pub common: RunOverrides,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Completed, but some records failed.
    Partial,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 1,
        }
    }
}

#[derive(Debug)]
pub struct CliError(pub String);

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn fail(e: impl Display) -> CliError {
    CliError(e.to_string())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

pub fn execute(command: Command) -> Result<Outcome, CliError> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Index(a) => index(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::SweepK(a) => sweep_k(a),
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::VerifyLosses(a) => verify_losses(a),
    }
}

fn ingest(a: IngestArgs) -> Result<Outcome, CliError> {
    let format = match a.format {
        Some(FormatArg::Jsonl) => CorpusFormat::Jsonl,
        Some(FormatArg::Tsv) => CorpusFormat::Tsv,
        None => CorpusFormat::from_extension(&a.input)
            .ok_or_else(|| fail(format!("cannot infer corpus format of {}; pass --format", a.input.display())))?,
    };
    let handle = ingest_corpus(&a.input, format, &a.store).map_err(fail)?;
    println!("{}", serde_json::to_string_pretty(&handle).map_err(fail)?);
    Ok(Outcome::Success)
}

fn index(a: IndexArgs) -> Result<Outcome, CliError> {
    let corpus = Corpus::open(&a.store).map_err(fail)?;
    let index = build_index(&corpus, a.k1, a.b).map_err(fail)?;
    let out = a.out.unwrap_or_else(|| a.store.join(INDEX_FILE));
    save_index(&index, &out).map_err(fail)?;
    println!(
        "indexed {} passages, {} terms, avg length {:.2} -> {}",
        index.doc_count,
        index.vocabulary_size(),
        index.avg_doc_len,
        out.display()
    );
    Ok(Outcome::Success)
}

/// Merges `--config` (if any) with command-line overrides.
pub fn resolve_config(o: &RunOverrides, variant: Option<VariantId>) -> Result<RunConfig, CliError> {
    let mut c = match &o.config {
        Some(p) => RunConfig::load(p).map_err(fail)?,
        None => RunConfig::default(),
    };
    if let Some(v) = variant {
        c.variant = v;
    }
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value.clone() {
                $field = v;
            }
        };
    }
    if o.dataset.is_some() {
        c.dataset = o.dataset.clone();
    }
    if o.dataset_name.is_some() {
        c.dataset_name = o.dataset_name.clone();
    }
    set!(c.out_dir, o.out_dir);
    set!(c.k, o.k);
    set!(c.concurrency_limit, o.concurrency);
    set!(c.generator.model, o.model);
    if o.store.is_some() {
        c.retriever.store = o.store.clone();
        c.retriever.kind = RetrieverKind::LocalBm25;
    }
    if o.index.is_some() {
        c.retriever.index = o.index.clone();
    }
    if o.retriever_endpoint.is_some() {
        c.retriever.endpoint = o.retriever_endpoint.clone();
        c.retriever.kind = RetrieverKind::Remote;
    }
    if o.mock_script.is_some() {
        c.generator.mock_script = o.mock_script.clone();
        c.generator.endpoint = None;
    }
    if o.endpoint.is_some() {
        c.generator.endpoint = o.endpoint.clone();
        c.generator.mock_script = None;
    }
    if o.mock_strict {
        c.generator.mock_strict = true;
    }
    if o.task_instruction.is_some() {
        c.task_instruction = o.task_instruction.clone();
    }
    if o.canonical {
        c.canonical = true;
    }
    if o.sequential {
        c.stage_branches_concurrent = false;
    }
    Ok(c)
}

pub fn build_gateway(c: &RunConfig) -> Result<Gateway, CliError> {
    let g = &c.generator;
    let backend: Arc<dyn Generator> = match (&g.mock_script, &g.endpoint) {
        (Some(path), None) => {
            let script = MockScript::load(path).map_err(fail)?.strict(g.mock_strict);
            Arc::new(MockGenerator::new(script))
        }
        (None, Some(endpoint)) => {
            let retry = RetryPolicy { max_retries: g.max_retries, ..RetryPolicy::default() };
            Arc::new(OpenAiClient::new(endpoint, Duration::from_secs(g.timeout_secs), retry).map_err(fail)?)
        }
        _ => return Err(fail("configure exactly one generator backend")),
    };
    Ok(Gateway::new(backend, c.concurrency_limit))
}

pub fn build_retriever(c: &RunConfig) -> Result<Option<Retriever>, CliError> {
    let r = &c.retriever;
    match r.kind {
        RetrieverKind::LocalBm25 => match &r.store {
            Some(store) => {
                let index = open_local(store, r.index.as_deref(), r.k1, r.b).map_err(fail)?;
                Ok(Some(Retriever::Local(Arc::new(index))))
            }
            None => Ok(None),
        },
        RetrieverKind::Remote => match &r.endpoint {
            Some(url) => Ok(Some(Retriever::Remote(
                RemoteRetriever::new(url.clone(), Duration::from_secs(r.timeout_secs)).map_err(fail)?,
            ))),
            None => Ok(None),
        },
    }
}

/// Reads a query file, rejecting invalid queries and repeated ids.
pub fn load_queries(path: &Path) -> Result<Vec<Query>, CliError> {
    let queries: Vec<Query> = read_jsonl(path).map_err(fail)?;
    if queries.is_empty() {
        return Err(fail(format!("{} contains no queries", path.display())));
    }
    let mut seen = std::collections::HashSet::new();
    for q in &queries {
        q.check().map_err(|e| fail(format!("query `{}`: {e}", q.id)))?;
        if !seen.insert(q.id.as_str()) {
            return Err(fail(format!("duplicate query id `{}`", q.id)));
        }
    }
    Ok(queries)
}

struct Prepared {
    config: RunConfig,
    queries: Vec<Query>,
    gateway: Gateway,
    retriever: Option<Retriever>,
}

fn prepare(config: RunConfig) -> Result<Prepared, CliError> {
    config.validate(true).map_err(fail)?;
    let queries = load_queries(config.dataset.as_deref().expect("validated"))?;
    let gateway = build_gateway(&config)?;
    let retriever = build_retriever(&config)?;
    Ok(Prepared { config, queries, gateway, retriever })
}

/// Runs one variant and writes `records.jsonl` plus the frozen config into
/// `dir`.
fn run_into(p: &Prepared, config: &RunConfig, dir: &Path) -> Result<(Vec<PipelineRecord>, Outcome), CliError> {
    let pipeline = Pipeline::new(&p.gateway, p.retriever.as_ref(), config.pipeline());
    log::info!("running {} over {} queries (k={})", config.variant, p.queries.len(), config.k);
    let records = pipeline.run_batch(&p.queries);
    write_jsonl(&dir.join(RECORDS_FILE), &records).map_err(fail)?;
    let mut frozen = config.clone();
    frozen.out_dir = dir.to_path_buf();
    frozen.freeze(dir).map_err(fail)?;
    let outcome = batch_outcome(&records)?;
    Ok((records, outcome))
}

fn batch_outcome(records: &[PipelineRecord]) -> Result<Outcome, CliError> {
    let failed: Vec<&PipelineRecord> = records.iter().filter(|r| r.is_failed()).collect();
    if failed.is_empty() {
        return Ok(Outcome::Success);
    }
    for r in &failed {
        eprintln!("query {} failed: {}", r.query.id, r.meta.error.as_deref().unwrap_or("?"));
    }
    let unreachable = |r: &&PipelineRecord| {
        r.meta.error.as_deref().is_some_and(|e| {
            e.contains("transport error") || e.contains("timed out") || e.contains("unreachable")
        })
    };
    if failed.len() == records.len() && failed.iter().all(unreachable) {
        return Err(fail(format!(
            "backend unreachable: {}",
            failed[0].meta.error.as_deref().unwrap_or_default()
        )));
    }
    eprintln!("{} of {} queries failed", failed.len(), records.len());
    Ok(Outcome::Partial)
}

fn run(a: RunArgs) -> Result<Outcome, CliError> {
    let p = prepare(resolve_config(&a.common, a.variant)?)?;
    let dir = p.config.out_dir.clone();
    let (records, outcome) = run_into(&p, &p.config, &dir)?;
    println!(
        "{} records ({} failed) -> {}",
        records.len(),
        records.iter().filter(|r| r.is_failed()).count(),
        dir.join(RECORDS_FILE).display()
    );
    Ok(outcome)
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(fail)?;
    let json = serde_json::to_string_pretty(report).map_err(fail)?;
    std::fs::write(dir.join("report.json"), json + "\n").map_err(fail)?;
    std::fs::write(dir.join("report.txt"), report.to_table()).map_err(fail)?;
    std::fs::write(dir.join("report_rows.csv"), report.rows_csv()).map_err(fail)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<Outcome, CliError> {
    let path = if a.records.is_dir() { a.records.join(RECORDS_FILE) } else { a.records.clone() };
    let records: Vec<PipelineRecord> = read_jsonl(&path).map_err(fail)?;
    let run_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dataset = a.dataset_name.clone().unwrap_or_else(|| {
        RunConfig::load(&run_dir.join(FROZEN_CONFIG_FILE))
            .map(|c| c.dataset_label())
            .unwrap_or_else(|_| "dataset".into())
    });
    let opts = EvalOptions {
        dataset,
        mode: match a.metric {
            MetricArg::Qa => MetricMode::Qa,
            MetricArg::Label => MetricMode::Label,
        },
        exclude_failed: a.exclude_failed,
    };
    let report = evaluate_run(&records, &opts).map_err(fail)?;
    write_report(&report, &a.out_dir.unwrap_or(run_dir))?;
    print!("{}", report.to_table());
    Ok(Outcome::Success)
}

/// One line of the retrieval-depth sweep.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub n: usize,
    pub failed: usize,
    pub em: f64,
    pub f1: f64,
    pub avg: f64,
}

pub fn sweep_table(variant: VariantId, rows: &[SweepRow]) -> String {
    let mut out = format!("{:<14} {:>4} {:>6} {:>8} {:>8} {:>8}\n", "variant", "k", "n", "EM", "F1", "Avg");
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>4} {:>6} {:>8.2} {:>8.2} {:>8.2}\n",
            variant.as_str(),
            r.k,
            r.n,
            r.em,
            r.f1,
            r.avg
        ));
    }
    out
}

fn sweep_k(a: SweepArgs) -> Result<Outcome, CliError> {
    if a.ks.is_empty() || a.ks.contains(&0) {
        return Err(fail("--ks must list positive depths"));
    }
    let p = prepare(resolve_config(&a.common, a.variant)?)?;
    if let Some(q) = p.queries.iter().find(|q| q.gold_answers.is_empty()) {
        return Err(fail(format!("query `{}` has no gold answers; sweep-k needs them", q.id)));
    }
    let base = p.config.out_dir.clone();
    let mut rows = Vec::new();
    let mut outcome = Outcome::Success;
    for &k in &a.ks {
        let mut cfg = p.config.clone();
        cfg.k = k;
        let dir = base.join(format!("k{k}"));
        let (records, o) = run_into(&p, &cfg, &dir)?;
        if o == Outcome::Partial {
            outcome = Outcome::Partial;
        }
        let opts = EvalOptions { dataset: cfg.dataset_label(), mode: cfg.metric, exclude_failed: false };
        let report = evaluate_run(&records, &opts).map_err(fail)?;
        write_report(&report, &dir)?;
        rows.push(SweepRow {
            k,
            n: report.n,
            failed: records.iter().filter(|r| r.is_failed()).count(),
            em: round_half_up(report.em_mean, 2),
            f1: round_half_up(report.f1_mean, 2),
            avg: round_half_up(report.avg, 2),
        });
    }
    let table = sweep_table(p.config.variant, &rows);
    std::fs::write(base.join("sweep.json"), serde_json::to_string_pretty(&rows).map_err(fail)? + "\n").map_err(fail)?;
    std::fs::write(base.join("sweep.txt"), &table).map_err(fail)?;
    print!("{table}");
    Ok(outcome)
}

fn synthesize_cmd(a: SynthesizeArgs) -> Result<Outcome, CliError> {
    let mut config = resolve_config(&a.common, Some(VariantId::CocoaZero))?;
    let mut outcome = Outcome::Success;
    let (cocoa, zero_shot) = match (&a.cocoa_records, &a.zero_shot_records) {
        (Some(c), Some(z)) => (
            read_jsonl::<PipelineRecord>(c).map_err(fail)?,
            read_jsonl::<PipelineRecord>(z).map_err(fail)?,
        ),
        _ => {
            let p = prepare(config.clone())?;
            let base = p.config.out_dir.clone();
            let (cocoa, o1) = run_into(&p, &p.config, &base.join("cocoa_zero"))?;
            let mut zs_cfg = p.config.clone();
            zs_cfg.variant = VariantId::ZeroShot;
            let (zero_shot, o2) = run_into(&p, &zs_cfg, &base.join("zero_shot"))?;
            if o1 == Outcome::Partial || o2 == Outcome::Partial {
                outcome = Outcome::Partial;
            }
            config = p.config;
            (cocoa, zero_shot)
        }
    };
    let hyper = TrainingHyperparameters { retrieval_k: config.k, ..TrainingHyperparameters::default() };
    let out = synthesize(&cocoa, &zero_shot, hyper).map_err(fail)?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir).map_err(fail)?;
    let sft: Vec<TrainingSample> = out.sft.into_iter().map(TrainingSample::Sft).collect();
    let dpo: Vec<TrainingSample> = out.dpo.into_iter().map(TrainingSample::Dpo).collect();
    for (name, samples, format) in [("sft.jsonl", &sft, DatasetFormat::Sft), ("dpo.jsonl", &dpo, DatasetFormat::Dpo)] {
        let path = dir.join(name);
        if samples.is_empty() {
            log::warn!("no {name} samples accepted; writing an empty file");
            std::fs::write(&path, "").map_err(fail)?;
        } else {
            export_dataset(samples, &path, format).map_err(fail)?;
        }
    }
    let manifest = serde_json::to_string_pretty(&out.manifest).map_err(fail)?;
    std::fs::write(dir.join("manifest.json"), manifest + "\n").map_err(fail)?;
    config.freeze(dir).map_err(fail)?;
    println!("sft: {}, dpo: {} -> {}", out.manifest.sft_count, out.manifest.dpo_count, dir.display());
    for (k, v) in &out.manifest.rejections {
        println!("  rejected {k}: {v}");
    }
    Ok(outcome)
}

fn verify_losses(a: VerifyArgs) -> Result<Outcome, CliError> {
    let report = run_suite(a.seed);
    std::fs::create_dir_all(&a.out_dir).map_err(fail)?;
    let json = serde_json::to_string_pretty(&report).map_err(fail)?;
    std::fs::write(a.out_dir.join("losses_report.json"), json + "\n").map_err(fail)?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    Ok(if report.passed { Outcome::Success } else { Outcome::Partial })
}
