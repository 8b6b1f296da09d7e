//! Command-line surface: every pipeline stage plus evaluation and a latency
//! benchmark, configured from an optional TOML file with flag overrides.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime failure, 3 validation failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::embedding::{
    Embedder, LiveEmbeddingProvider, MockEmbeddingProvider, SimilarityConfig,
};
use crate::evaluation::{
    classify_with_mode, count_facts_with_validity, er_rr_scores, load_gold, rates, tuples_of,
    EvalError, EvaluationReport, MatchMode,
};
use crate::extraction::Extractor;
use crate::gateway::{BackendConfig, BackendKind, Gateway, RetryPolicy};
use crate::merge::parallel_merge;
use crate::model::Tkg;
use crate::pipeline::{group_by_observation, Granularity, Pipeline, PipelineConfig};
use crate::storage::{
    load_corpus, load_facts, load_graph, save_corpus, save_facts, save_graph, write_atomic,
    StorageError,
};
use crate::synthetic::{synthetic_corpus, CorpusShape};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Validation(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) | CliError::Validation(m) => m,
        }
    }
}

impl From<StorageError> for CliError {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::Validation { .. } | StorageError::UnsupportedVersion { .. } => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<crate::pipeline::PipelineError> for CliError {
    fn from(e: crate::pipeline::PipelineError) -> Self {
        match e {
            crate::pipeline::PipelineError::Storage(inner) => inner.into(),
            crate::pipeline::PipelineError::Merge(crate::merge::MergeError::InvalidInput {
                ..
            }) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<crate::merge::MergeError> for CliError {
    fn from(e: crate::merge::MergeError) -> Self {
        match e {
            crate::merge::MergeError::InvalidInput { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnlabeledMention { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<crate::gateway::GatewayError> for CliError {
    fn from(e: crate::gateway::GatewayError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crate::embedding::EmbedError> for CliError {
    fn from(e: crate::embedding::EmbedError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Argument tree
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Live,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Day,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatchModeArg {
    Exact,
    Similarity,
}

#[derive(Debug, Parser)]
#[command(
    name = "atom",
    version,
    about = "Build and continuously update dynamic temporal knowledge graphs from timestamped text"
)]
pub struct Cli {
    /// TOML configuration file; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Completion/embedding backend.
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendArg>,
    /// Merge worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Entity-resolution similarity threshold.
    #[arg(long = "theta-entity", global = true)]
    pub theta_entity: Option<f64>,
    /// Relation-name similarity threshold.
    #[arg(long = "theta-relation", global = true)]
    pub theta_relation: Option<f64>,
    /// Chunking token budget.
    #[arg(long = "max-chunk-tokens", global = true)]
    pub max_chunk_tokens: Option<usize>,
    /// Extraction batch size (bounds concurrent model calls).
    #[arg(long = "batch-size", global = true)]
    pub batch_size: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Group a corpus into observation batches and write a manifest.
    Ingest(IngestArgs),
    /// Chunk a corpus and decompose it into atomic facts.
    Decompose(DecomposeArgs),
    /// Extract atomic graphs from a facts file into a directory.
    Extract(ExtractArgs),
    /// Merge a directory of graphs into one snapshot.
    Merge(MergeArgs),
    /// Corpus → consolidated graph, end to end.
    Build(BuildArgs),
    /// Fold a new corpus into an existing graph.
    Update(UpdateArgs),
    /// Score a predicted graph against gold annotations.
    Eval(EvalArgs),
    /// Synthetic scaling series; writes stage latencies as CSV.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "day")]
    pub granularity: GranularityArg,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub facts: PathBuf,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long = "in-dir")]
    pub in_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop embeddings from the written snapshot.
    #[arg(long = "strip-embeddings", default_value_t = false)]
    pub strip_embeddings: bool,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "checkpoint-dir")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Write the per-batch stage report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "day")]
    pub granularity: GranularityArg,
}

#[derive(Debug, Args)]
pub struct UpdateArgs {
    #[arg(long)]
    pub dtkg: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "day")]
    pub granularity: GranularityArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predicted: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum, default_value = "exact")]
    pub mode: MatchModeArg,
    /// Similarity threshold for the paraphrase fallback.
    #[arg(long = "match-threshold", default_value_t = 0.9)]
    pub match_threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated fact counts, e.g. 500,1000,2000,4000.
    #[arg(long, default_value = "500,1000,2000,4000")]
    pub series: String,
    #[arg(long)]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Configuration file
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    pipeline: FilePipeline,
    #[serde(default)]
    similarity: FileSimilarity,
    #[serde(default)]
    backend: FileBackend,
    #[serde(default)]
    embedding: FileEmbedding,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePipeline {
    max_chunk_tokens: Option<usize>,
    batch_size: Option<usize>,
    workers: Option<usize>,
    failure_budget: Option<f64>,
    granularity: Option<Granularity>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSimilarity {
    lambda: Option<f64>,
    beta: Option<f64>,
    theta_entity: Option<f64>,
    theta_relation: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBackend {
    kind: Option<BackendKind>,
    endpoint: Option<String>,
    model_id: Option<String>,
    api_key_env_var: Option<String>,
    max_concurrent_requests: Option<usize>,
    max_attempts: Option<u32>,
    base_backoff_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEmbedding {
    cache_path: Option<PathBuf>,
    api_key_env_var: Option<String>,
}

struct Effective {
    pipeline: PipelineConfig,
    backend: BackendConfig,
    embed_cache: Option<PathBuf>,
    embed_key_env: String,
}

fn resolve(cli: &Cli) -> Result<Effective, CliError> {
    let file: FileConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let mut similarity = SimilarityConfig::default();
    if let Some(v) = file.similarity.lambda {
        similarity.lambda = v;
    }
    if let Some(v) = file.similarity.beta {
        similarity.beta = v;
    }
    if let Some(v) = file.similarity.theta_entity {
        similarity.theta_entity = v;
    }
    if let Some(v) = file.similarity.theta_relation {
        similarity.theta_relation = v;
    }
    if let Some(v) = cli.theta_entity {
        similarity.theta_entity = v;
    }
    if let Some(v) = cli.theta_relation {
        similarity.theta_relation = v;
    }
    similarity
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let mut pipeline = PipelineConfig {
        similarity,
        ..PipelineConfig::default()
    };
    if let Some(v) = file.pipeline.max_chunk_tokens {
        pipeline.max_chunk_tokens = v;
    }
    if let Some(v) = file.pipeline.batch_size {
        pipeline.extraction_batch_size = v;
    }
    if let Some(v) = file.pipeline.workers {
        pipeline.merge_workers = v;
    }
    if let Some(v) = file.pipeline.failure_budget {
        pipeline.failure_budget = v;
    }
    if let Some(v) = file.pipeline.granularity {
        pipeline.granularity = v;
    }
    if let Some(v) = cli.max_chunk_tokens {
        pipeline.max_chunk_tokens = v;
    }
    if let Some(v) = cli.batch_size {
        pipeline.extraction_batch_size = v;
    }
    if let Some(v) = cli.workers {
        pipeline.merge_workers = v;
    }
    if pipeline.max_chunk_tokens < 16
        || pipeline.extraction_batch_size == 0
        || pipeline.merge_workers == 0
    {
        return Err(CliError::Usage(
            "max-chunk-tokens must be ≥ 16 and batch-size/workers positive".into(),
        ));
    }

    let mut backend = match file.backend.kind {
        Some(BackendKind::Live) => BackendConfig::live_from_env(),
        _ => BackendConfig::mock(),
    };
    if let Some(v) = file.backend.endpoint {
        backend.endpoint = v;
    }
    if let Some(v) = file.backend.model_id {
        backend.model_id = v;
    }
    if let Some(v) = file.backend.api_key_env_var {
        backend.api_key_env_var = v;
    }
    if let Some(v) = file.backend.max_concurrent_requests {
        backend.max_concurrent_requests = v;
    }
    backend.retry = RetryPolicy {
        max_attempts: file.backend.max_attempts.unwrap_or(5),
        base_backoff_ms: file.backend.base_backoff_ms.unwrap_or(500),
    };
    match cli.backend {
        Some(BackendArg::Live) => {
            if backend.kind != BackendKind::Live {
                let retained = backend.retry.clone();
                let mut live = BackendConfig::live_from_env();
                live.api_key_env_var = backend.api_key_env_var.clone();
                live.max_concurrent_requests = backend.max_concurrent_requests;
                live.retry = retained;
                if !backend.endpoint.is_empty() {
                    live.endpoint = backend.endpoint.clone();
                }
                if !backend.model_id.is_empty() && backend.model_id != "mock" {
                    live.model_id = backend.model_id.clone();
                }
                backend = live;
            }
        }
        Some(BackendArg::Mock) => backend.kind = BackendKind::Mock,
        None => {}
    }
    backend.max_concurrent_requests = pipeline.extraction_batch_size;

    Ok(Effective {
        pipeline,
        backend,
        embed_cache: file.embedding.cache_path,
        embed_key_env: file
            .embedding
            .api_key_env_var
            .unwrap_or_else(|| "ATOM_API_KEY".to_string()),
    })
}

fn build_embedder(effective: &Effective) -> Result<Embedder, CliError> {
    let provider: Arc<dyn crate::embedding::EmbeddingProvider> = match effective.backend.kind {
        BackendKind::Mock => Arc::new(MockEmbeddingProvider::new()),
        BackendKind::Live => Arc::new(LiveEmbeddingProvider::from_env(&effective.embed_key_env)?),
    };
    match &effective.embed_cache {
        Some(path) => Ok(Embedder::open(provider, path)?),
        None => Ok(Embedder::in_memory(provider)),
    }
}

fn build_pipeline(effective: &Effective, checkpoint_dir: Option<PathBuf>) -> Result<Pipeline, CliError> {
    let gateway = Gateway::from_config(&effective.backend)?;
    let embedder = build_embedder(effective)?;
    let mut config = effective.pipeline.clone();
    config.checkpoint_dir = checkpoint_dir;
    Ok(Pipeline::new(config, gateway, embedder))
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let effective = resolve(cli)?;
    match &cli.command {
        Command::Ingest(args) => ingest(args),
        Command::Decompose(args) => decompose(&effective, args),
        Command::Extract(args) => extract(&effective, args),
        Command::Merge(args) => merge(&effective, args),
        Command::Build(args) => build(&effective, args),
        Command::Update(args) => update(&effective, args),
        Command::Eval(args) => eval(&effective, args),
        Command::Bench(args) => bench(&effective, args),
    }
}

fn granularity_of(arg: GranularityArg) -> Granularity {
    match arg {
        GranularityArg::Day => Granularity::Day,
        GranularityArg::Exact => Granularity::Exact,
    }
}

fn ingest(args: &IngestArgs) -> Result<(), CliError> {
    let documents = load_corpus(&args.corpus)?;
    let batches = group_by_observation(documents, granularity_of(args.granularity));
    let manifest: Vec<serde_json::Value> = batches
        .iter()
        .map(|batch| {
            serde_json::json!({
                "observed_at": batch.observed_at.as_unix(),
                "date": batch.observed_at.to_iso_date(),
                "doc_ids": batch.documents.iter().map(|d| d.doc_id.clone()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let text = serde_json::to_string_pretty(&serde_json::json!({ "batches": manifest }))
        .expect("manifest serializes");
    write_atomic(&args.out, text.as_bytes())?;
    println!(
        "ingested {} documents into {} batches → {}",
        batches.iter().map(|b| b.documents.len()).sum::<usize>(),
        batches.len(),
        args.out.display()
    );
    Ok(())
}

fn decompose(effective: &Effective, args: &DecomposeArgs) -> Result<(), CliError> {
    let documents = load_corpus(&args.corpus)?;
    let gateway = Gateway::from_config(&effective.backend)?;
    let extractor = Extractor::new();
    let mut chunks = Vec::new();
    for doc in &documents {
        chunks.extend(crate::extraction::chunk_document(
            doc,
            effective.pipeline.max_chunk_tokens,
        ));
    }
    let slots = extractor.decompose_all(&chunks, &gateway);
    let mut facts = Vec::new();
    let mut failed = 0usize;
    let mut sample = String::new();
    for slot in slots {
        match slot {
            Ok(chunk_facts) => facts.extend(chunk_facts),
            Err(e) => {
                failed += 1;
                if sample.is_empty() {
                    sample = e.to_string();
                }
            }
        }
    }
    check_budget(failed, chunks.len(), effective.pipeline.failure_budget, &sample)?;
    save_facts(&facts, &args.out)?;
    println!(
        "decomposed {} chunks into {} atomic facts → {}",
        chunks.len(),
        facts.len(),
        args.out.display()
    );
    Ok(())
}

fn check_budget(failed: usize, total: usize, budget: f64, sample: &str) -> Result<(), CliError> {
    if total > 0 && (failed as f64 / total as f64) > budget {
        return Err(CliError::Runtime(format!(
            "{failed} of {total} slots failed (budget {budget}); first: {sample}"
        )));
    }
    if failed > 0 {
        eprintln!("warning: {failed} of {total} slots failed within budget");
    }
    Ok(())
}

fn sanitize_file_stem(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn extract(effective: &Effective, args: &ExtractArgs) -> Result<(), CliError> {
    let facts = load_facts(&args.facts)?;
    let gateway = Gateway::from_config(&effective.backend)?;
    let embedder = build_embedder(effective)?;
    let extractor = Extractor::new();
    let slots = extractor.extract_all(&facts, &gateway, &embedder);
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let mut failed = 0usize;
    let mut written = 0usize;
    let mut sample = String::new();
    for (fact, slot) in facts.iter().zip(slots) {
        match slot {
            Ok(graph) => {
                let name = format!("{}.json", sanitize_file_stem(&fact.fact_id));
                save_graph(&graph, &args.out_dir.join(name), true)?;
                written += 1;
            }
            Err(e) => {
                failed += 1;
                if sample.is_empty() {
                    sample = e.to_string();
                }
            }
        }
    }
    check_budget(failed, facts.len(), effective.pipeline.failure_budget, &sample)?;
    println!(
        "extracted {written} atomic graphs → {}",
        args.out_dir.display()
    );
    Ok(())
}

fn merge(effective: &Effective, args: &MergeArgs) -> Result<(), CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.in_dir)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", args.in_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
        .collect();
    paths.sort();
    let mut graphs = Vec::with_capacity(paths.len());
    for path in &paths {
        graphs.push(load_graph(path)?);
    }
    let merged = parallel_merge(&graphs, &effective.pipeline.merge_config())?;
    save_graph(&merged, &args.out, !args.strip_embeddings)?;
    println!(
        "merged {} graphs into {} entities / {} relations → {}",
        graphs.len(),
        merged.entities.len(),
        merged.relations.len(),
        args.out.display()
    );
    Ok(())
}

fn build(effective: &Effective, args: &BuildArgs) -> Result<(), CliError> {
    let documents = load_corpus(&args.corpus)?;
    let batches = group_by_observation(documents, granularity_of(args.granularity));
    let pipeline = build_pipeline(effective, args.checkpoint_dir.clone())?;
    let outcome = pipeline.run_stream(&batches, Tkg::new())?;
    save_graph(&outcome.dtkg, &args.out, true)?;
    if let Some(report_path) = &args.report {
        let text = serde_json::to_string_pretty(&outcome.reports).expect("reports serialize");
        write_atomic(report_path, text.as_bytes())?;
    }
    println!(
        "built graph from {} batches ({} resumed): {} entities / {} relations → {}",
        outcome.batches_processed + outcome.batches_resumed,
        outcome.batches_resumed,
        outcome.dtkg.entities.len(),
        outcome.dtkg.relations.len(),
        args.out.display()
    );
    Ok(())
}

fn update(effective: &Effective, args: &UpdateArgs) -> Result<(), CliError> {
    let initial = load_graph(&args.dtkg)?;
    let documents = load_corpus(&args.corpus)?;
    let batches = group_by_observation(documents, granularity_of(args.granularity));
    let pipeline = build_pipeline(effective, None)?;
    let outcome = pipeline.run_stream(&batches, initial)?;
    save_graph(&outcome.dtkg, &args.out, true)?;
    println!(
        "updated graph with {} batches: {} entities / {} relations → {}",
        outcome.batches_processed,
        outcome.dtkg.entities.len(),
        outcome.dtkg.relations.len(),
        args.out.display()
    );
    Ok(())
}

fn eval(effective: &Effective, args: &EvalArgs) -> Result<(), CliError> {
    let predicted = load_graph(&args.predicted)?;
    let gold = load_gold(&args.gold)?;
    let embedder = build_embedder(effective)?;
    let mode = match args.mode {
        MatchModeArg::Exact => MatchMode::Exact,
        MatchModeArg::Similarity => MatchMode::Similarity {
            threshold: args.match_threshold,
        },
    };
    let predicted_tuples = tuples_of(&predicted);
    let classification =
        classify_with_mode(&predicted_tuples, &gold.tuples, mode, Some(&embedder))?;
    let counts = classification.counts();
    let (with_validity, without_validity) =
        count_facts_with_validity(std::slice::from_ref(&predicted));
    let er_rr = if gold.entity_clusters.is_empty() && gold.relation_clusters.is_empty() {
        None
    } else {
        Some(er_rr_scores(
            &predicted,
            &gold,
            &embedder,
            &effective.pipeline.similarity,
        )?)
    };
    let report = EvaluationReport {
        matcher: mode.describe(),
        counts,
        rates: rates(&counts),
        stability: None,
        er_rr,
        tuples_with_validity: with_validity,
        tuples_without_validity: without_validity,
        config: serde_json::to_value(&effective.pipeline).expect("config serializes"),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(path) => {
            write_atomic(path, format!("{text}\n").as_bytes())?;
            println!("evaluation report → {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn bench(effective: &Effective, args: &BenchArgs) -> Result<(), CliError> {
    let sizes: Result<Vec<usize>, _> = args
        .series
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect();
    let sizes = sizes.map_err(|e| CliError::Usage(format!("bad --series: {e}")))?;
    if sizes.is_empty() {
        return Err(CliError::Usage("--series must list at least one size".into()));
    }
    let mut csv = String::from("n_facts,stage,millis\n");
    let mut summaries: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, &n_facts) in sizes.iter().enumerate() {
        let facts_per_document = 5usize;
        let shape = CorpusShape {
            n_documents: n_facts.div_ceil(facts_per_document),
            facts_per_document,
            name_pool: (n_facts / 4).clamp(16, 400),
            ..CorpusShape::default()
        };
        let documents = synthetic_corpus(1000 + i as u64, shape);
        let batches = group_by_observation(documents, Granularity::Day);
        let pipeline = build_pipeline(effective, None)?;
        let report = pipeline.bench(&batches)?;
        for row in report.rows() {
            csv.push_str(&format!("{},{},{:.3}\n", row.n_facts, row.stage, row.millis));
        }
        summaries.insert(report.n_facts, report.merge_share);
        println!(
            "n_facts={} backend={} total={:.1} ms merge_share={:.1}%",
            report.n_facts,
            report.backend,
            report.total_ms,
            report.merge_share * 100.0
        );
    }
    write_atomic(&args.out, csv.as_bytes())?;
    println!("bench series → {}", args.out.display());
    let _ = summaries;
    Ok(())
}

// ---------------------------------------------------------------------------
// Fixture helper shared with integration tests
// ---------------------------------------------------------------------------

/// Writes a small mock-grammar corpus; used by the test suites and handy for
/// trying the CLI by hand.
pub fn write_demo_corpus(path: &Path) -> Result<(), CliError> {
    let docs = synthetic_corpus(7, CorpusShape::default());
    save_corpus(&docs, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["atom", "frobnicate"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["atom", "--help"]), 0);
    }

    #[test]
    fn bad_series_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("bench.csv");
        assert_eq!(
            run([
                "atom",
                "bench",
                "--series",
                "abc",
                "--out",
                out.to_str().unwrap()
            ]),
            1
        );
    }

    #[test]
    fn config_file_overrides_and_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("atom.toml");
        std::fs::write(
            &config_path,
            "[pipeline]\nworkers = 2\nbatch_size = 7\n[similarity]\ntheta_entity = 0.9\n",
        )
        .unwrap();
        let cli = Cli::try_parse_from([
            "atom",
            "--config",
            config_path.to_str().unwrap(),
            "--theta-entity",
            "0.85",
            "ingest",
            "--corpus",
            "x.jsonl",
            "--out",
            "y.json",
        ])
        .unwrap();
        let effective = resolve(&cli).unwrap();
        assert_eq!(effective.pipeline.merge_workers, 2);
        assert_eq!(effective.pipeline.extraction_batch_size, 7);
        assert!((effective.pipeline.similarity.theta_entity - 0.85).abs() < 1e-12);
        assert_eq!(effective.backend.max_concurrent_requests, 7);
    }

    #[test]
    fn invalid_similarity_config_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("atom.toml");
        std::fs::write(&config_path, "[similarity]\nlambda = 0.9\nbeta = 0.9\n").unwrap();
        let cli = Cli::try_parse_from([
            "atom",
            "--config",
            config_path.to_str().unwrap(),
            "ingest",
            "--corpus",
            "x.jsonl",
            "--out",
            "y.json",
        ])
        .unwrap();
        assert!(matches!(resolve(&cli), Err(CliError::Usage(_))));
    }
}
