//! End-to-end orchestration: group documents by observation time, build one
//! snapshot graph per observation batch (chunk → decompose → extract →
//! parallel merge), and fold snapshots into the running graph in observation
//! order, checkpointing after every batch.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, SimilarityConfig};
use crate::extraction::{chunk_document, AtomicFact, Chunk, Document, Extractor};
use crate::gateway::{BackendKind, Gateway, GatewayError};
use crate::merge::{parallel_merge, update_dtkg, MergeConfig, MergeError};
use crate::model::{Timestamp, Tkg};
use crate::storage::{load_graph, save_graph, write_atomic, StorageError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("batches must be in ascending observation order")]
    UnorderedBatches,
    #[error(
        "batch {batch}: {failed} of {total} extraction slots failed, over the {budget} budget; first: {sample}"
    )]
    FailureBudgetExceeded {
        batch: String,
        failed: usize,
        total: usize,
        budget: f64,
        sample: String,
    },
    #[error("checkpoint conflict: {0}")]
    CheckpointConflict(String),
}

/// All documents that share one observation timestamp at the configured
/// granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub observed_at: Timestamp,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Day,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub max_chunk_tokens: usize,
    pub extraction_batch_size: usize,
    pub merge_workers: usize,
    pub similarity: SimilarityConfig,
    pub failure_budget: f64,
    pub granularity: Granularity,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_chunk_tokens: 400,
            extraction_batch_size: 40,
            merge_workers: 8,
            similarity: SimilarityConfig::default(),
            failure_budget: 0.1,
            granularity: Granularity::Day,
            checkpoint_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn merge_config(&self) -> MergeConfig {
        MergeConfig {
            similarity: self.similarity,
            workers: self.merge_workers,
        }
    }
}

/// Groups documents by truncated observation timestamp, ascending.
pub fn group_by_observation(
    documents: Vec<Document>,
    granularity: Granularity,
) -> Vec<ObservationBatch> {
    let mut batches: std::collections::BTreeMap<i64, Vec<Document>> =
        std::collections::BTreeMap::new();
    for doc in documents {
        let key = match granularity {
            Granularity::Day => doc.observed_at.truncate_to_day().as_unix(),
            Granularity::Exact => doc.observed_at.as_unix(),
        };
        batches.entry(key).or_default().push(doc);
    }
    batches
        .into_iter()
        .map(|(key, documents)| ObservationBatch {
            observed_at: Timestamp::from_unix(key),
            documents,
        })
        .collect()
}

/// Per-stage counts and wall-clock timings for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StageReport {
    pub batch_key: i64,
    pub documents: usize,
    pub chunks: usize,
    pub facts: usize,
    pub atomic_graphs: usize,
    pub tuples: usize,
    pub failed_decompose_slots: usize,
    pub failed_extract_slots: usize,
    pub decompose_ms: f64,
    pub extract_ms: f64,
    pub merge_ms: f64,
    pub update_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub graph: Tkg,
    pub report: StageReport,
}

#[derive(Debug)]
pub struct StreamOutcome {
    pub dtkg: Tkg,
    pub batches_processed: usize,
    pub batches_resumed: usize,
    pub reports: Vec<StageReport>,
}

/// One aggregate timing report for a stream run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BenchReport {
    pub backend: String,
    pub n_facts: usize,
    pub n_tuples: usize,
    pub decompose_ms: f64,
    pub extract_ms: f64,
    pub merge_ms: f64,
    pub update_ms: f64,
    pub total_ms: f64,
    /// Share of total latency spent in merging (parallel merge plus the
    /// consolidation of each snapshot into the running graph).
    pub merge_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_facts: usize,
    pub stage: &'static str,
    pub millis: f64,
}

impl BenchReport {
    pub fn rows(&self) -> Vec<BenchRow> {
        [
            ("decompose", self.decompose_ms),
            ("extract", self.extract_ms),
            ("merge", self.merge_ms),
            ("update", self.update_ms),
            ("total", self.total_ms),
        ]
        .into_iter()
        .map(|(stage, millis)| BenchRow {
            n_facts: self.n_facts,
            stage,
            millis,
        })
        .collect()
    }
}

#[derive(Debug, Serialize, Deserialize, Default)]
struct Manifest {
    format_version: u32,
    processed: Vec<ProcessedBatch>,
}

#[derive(Debug, Serialize, Deserialize, Clone)]
struct ProcessedBatch {
    key: i64,
    file: String,
}

/// One pipeline instance processes one stream; it is not shared across
/// concurrent callers. Extraction fan-out and merge fan-out run concurrently
/// inside a batch; batches never overlap.
pub struct Pipeline {
    config: PipelineConfig,
    gateway: Gateway,
    embedder: Embedder,
    extractor: Extractor,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, gateway: Gateway, embedder: Embedder) -> Self {
        Pipeline {
            config,
            gateway,
            embedder,
            extractor: Extractor::new(),
        }
    }

    pub fn with_extractor(mut self, extractor: Extractor) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    /// chunk → decompose → extract → parallel merge for one batch.
    pub fn build_snapshot(&self, batch: &ObservationBatch) -> Result<Snapshot, PipelineError> {
        let mut report = StageReport {
            batch_key: batch.observed_at.as_unix(),
            documents: batch.documents.len(),
            ..StageReport::default()
        };

        let chunks: Vec<Chunk> = batch
            .documents
            .iter()
            .flat_map(|doc| chunk_document(doc, self.config.max_chunk_tokens))
            .collect();
        report.chunks = chunks.len();

        let started = Instant::now();
        let decomposed = self.extractor.decompose_all(&chunks, &self.gateway);
        report.decompose_ms = elapsed_ms(started);
        let mut facts: Vec<AtomicFact> = Vec::new();
        let mut first_error: Option<String> = None;
        for slot in decomposed {
            match slot {
                Ok(chunk_facts) => facts.extend(chunk_facts),
                Err(e) => {
                    report.failed_decompose_slots += 1;
                    first_error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        report.facts = facts.len();

        let started = Instant::now();
        let extracted = self
            .extractor
            .extract_all(&facts, &self.gateway, &self.embedder);
        report.extract_ms = elapsed_ms(started);
        let mut graphs: Vec<Tkg> = Vec::new();
        for slot in extracted {
            match slot {
                Ok(graph) => graphs.push(graph),
                Err(e) => {
                    report.failed_extract_slots += 1;
                    first_error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        report.atomic_graphs = graphs.len();
        report.tuples = graphs.iter().map(|g| g.relations.len()).sum();

        let failed = report.failed_decompose_slots + report.failed_extract_slots;
        let total = report.chunks + report.facts;
        if total > 0 && (failed as f64 / total as f64) > self.config.failure_budget {
            return Err(PipelineError::FailureBudgetExceeded {
                batch: batch.observed_at.to_iso_date(),
                failed,
                total,
                budget: self.config.failure_budget,
                sample: first_error.unwrap_or_default(),
            });
        }

        let started = Instant::now();
        let graph = parallel_merge(&graphs, &self.config.merge_config())?;
        report.merge_ms = elapsed_ms(started);
        Ok(Snapshot { graph, report })
    }

    /// Folds snapshots into the running graph in observation order, starting
    /// from `initial`. With a checkpoint directory configured, the graph is
    /// persisted after every batch and an interrupted run resumes from the
    /// last processed batch.
    pub fn run_stream(
        &self,
        batches: &[ObservationBatch],
        initial: Tkg,
    ) -> Result<StreamOutcome, PipelineError> {
        for pair in batches.windows(2) {
            if pair[0].observed_at >= pair[1].observed_at {
                return Err(PipelineError::UnorderedBatches);
            }
        }

        let mut manifest = Manifest {
            format_version: 1,
            processed: Vec::new(),
        };
        let mut dtkg = initial;
        let mut resumed = 0usize;
        if let Some(dir) = &self.config.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| StorageError::Io {
                path: dir.display().to_string(),
                reason: e.to_string(),
            })?;
            let manifest_path = dir.join("manifest.json");
            if manifest_path.exists() {
                let text =
                    std::fs::read_to_string(&manifest_path).map_err(|e| StorageError::Io {
                        path: manifest_path.display().to_string(),
                        reason: e.to_string(),
                    })?;
                manifest = serde_json::from_str(&text).map_err(|e| StorageError::Parse {
                    path: manifest_path.display().to_string(),
                    reason: e.to_string(),
                })?;
            }
            if !manifest.processed.is_empty() {
                if !dtkg.is_empty() {
                    return Err(PipelineError::CheckpointConflict(
                        "checkpoint directory already holds progress but a non-empty initial \
                         graph was supplied"
                            .into(),
                    ));
                }
                if manifest.processed.len() > batches.len() {
                    return Err(PipelineError::CheckpointConflict(format!(
                        "manifest lists {} processed batches but only {} were supplied",
                        manifest.processed.len(),
                        batches.len()
                    )));
                }
                for (done, batch) in manifest.processed.iter().zip(batches.iter()) {
                    if done.key != batch.observed_at.as_unix() {
                        return Err(PipelineError::CheckpointConflict(format!(
                            "manifest batch key {} does not match supplied batch {}",
                            done.key,
                            batch.observed_at.as_unix()
                        )));
                    }
                }
                let last = manifest.processed.last().unwrap();
                dtkg = load_graph(&dir.join(&last.file))?;
                resumed = manifest.processed.len();
            }
        }

        let mut reports = Vec::new();
        for batch in &batches[resumed..] {
            let snapshot = self.build_snapshot(batch)?;
            let mut report = snapshot.report;
            let started = Instant::now();
            dtkg = update_dtkg(&dtkg, &snapshot.graph, &self.config.merge_config())?;
            report.update_ms = elapsed_ms(started);
            reports.push(report);

            if let Some(dir) = &self.config.checkpoint_dir {
                let key = batch.observed_at.as_unix();
                let file = format!("dtkg_{key}.json");
                save_graph(&dtkg, &dir.join(&file), true)?;
                manifest.processed.push(ProcessedBatch { key, file });
                let text = serde_json::to_string_pretty(&manifest)
                    .expect("manifest serializes");
                write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
            }
        }

        Ok(StreamOutcome {
            dtkg,
            batches_processed: batches.len() - resumed,
            batches_resumed: resumed,
            reports,
        })
    }

    /// Runs the stream without checkpoints and reports wall-clock per stage.
    pub fn bench(&self, batches: &[ObservationBatch]) -> Result<BenchReport, PipelineError> {
        let started = Instant::now();
        let mut report = BenchReport {
            backend: match self.gateway.kind() {
                BackendKind::Mock => "mock".to_string(),
                BackendKind::Live => "live".to_string(),
            },
            ..BenchReport::default()
        };
        let mut dtkg = Tkg::new();
        for batch in batches {
            let snapshot = self.build_snapshot(batch)?;
            report.n_facts += snapshot.report.facts;
            report.n_tuples += snapshot.report.tuples;
            report.decompose_ms += snapshot.report.decompose_ms;
            report.extract_ms += snapshot.report.extract_ms;
            report.merge_ms += snapshot.report.merge_ms;
            let update_started = Instant::now();
            dtkg = update_dtkg(&dtkg, &snapshot.graph, &self.config.merge_config())?;
            report.update_ms += elapsed_ms(update_started);
        }
        report.total_ms = elapsed_ms(started);
        if report.total_ms > 0.0 {
            report.merge_share = (report.merge_ms + report.update_ms) / report.total_ms;
        }
        Ok(report)
    }
}

fn elapsed_ms(started: Instant) -> f64 {
    started.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::MockEmbeddingProvider;
    use crate::gateway::MockBackend;
    use std::sync::Arc;

    fn day(y: i32, m: u32, d: u32) -> Timestamp {
        Timestamp::from_ymd(y, m, d).unwrap()
    }

    fn mock_pipeline(config: PipelineConfig) -> Pipeline {
        let gateway = Gateway::new(Arc::new(MockBackend::new()), config.extraction_batch_size);
        let embedder = Embedder::in_memory(Arc::new(MockEmbeddingProvider::new()));
        Pipeline::new(config, gateway, embedder)
    }

    fn doc(id: &str, text: &str, observed: Timestamp) -> Document {
        Document::new(id, text, observed).unwrap()
    }

    #[test]
    fn grouping_by_day_orders_and_buckets() {
        let d1 = day(2020, 1, 9);
        let d2 = day(2020, 1, 10);
        let docs = vec![
            doc("a", "x | p | y", d2),
            doc("b", "x | p | y", d1),
            doc("c", "x | p | y", d1),
        ];
        let batches = group_by_observation(docs, Granularity::Day);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].observed_at, d1);
        assert_eq!(batches[0].documents.len(), 2);
        assert_eq!(batches[1].observed_at, d2);
    }

    #[test]
    fn grouping_empty_corpus() {
        assert!(group_by_observation(vec![], Granularity::Day).is_empty());
    }

    #[test]
    fn grouping_exact_keeps_intraday_times_apart() {
        let base = day(2020, 1, 9).as_unix();
        let docs = vec![
            doc("a", "x | p | y", Timestamp::from_unix(base + 60)),
            doc("b", "x | p | y", Timestamp::from_unix(base + 120)),
        ];
        assert_eq!(group_by_observation(docs.clone(), Granularity::Day).len(), 1);
        assert_eq!(group_by_observation(docs, Granularity::Exact).len(), 2);
    }

    #[test]
    fn snapshot_of_single_fact_document_is_the_atomic_graph() {
        let pipeline = mock_pipeline(PipelineConfig::default());
        let batch = ObservationBatch {
            observed_at: day(2021, 4, 1),
            documents: vec![doc("d1", "mars:planet | orbits | sun:star", day(2021, 4, 1))],
        };
        let snapshot = pipeline.build_snapshot(&batch).unwrap();
        assert_eq!(snapshot.graph.entities.len(), 2);
        assert_eq!(snapshot.graph.relations.len(), 1);
        assert_eq!(snapshot.report.facts, 1);
        assert!(snapshot.graph.validate().is_empty());
    }

    #[test]
    fn failure_budget_aborts_poisoned_batch() {
        let config = PipelineConfig {
            failure_budget: 0.1,
            ..PipelineConfig::default()
        };
        let pipeline = mock_pipeline(config);
        let batch = ObservationBatch {
            observed_at: day(2021, 4, 1),
            documents: vec![doc("d1", "total gibberish with no grammar", day(2021, 4, 1))],
        };
        let err = pipeline.build_snapshot(&batch).unwrap_err();
        assert!(matches!(err, PipelineError::FailureBudgetExceeded { .. }));
    }

    #[test]
    fn unordered_batches_are_rejected() {
        let pipeline = mock_pipeline(PipelineConfig::default());
        let batches = vec![
            ObservationBatch {
                observed_at: day(2021, 4, 2),
                documents: vec![],
            },
            ObservationBatch {
                observed_at: day(2021, 4, 1),
                documents: vec![],
            },
        ];
        assert!(matches!(
            pipeline.run_stream(&batches, Tkg::new()),
            Err(PipelineError::UnorderedBatches)
        ));
    }

    #[test]
    fn stream_resolves_ceo_start_end_across_batches() {
        let pipeline = mock_pipeline(PipelineConfig::default());
        let docs = vec![
            doc(
                "d1",
                "John Doe is the CEO of X since January 1, 2025.",
                day(2025, 1, 10),
            ),
            doc(
                "d2",
                "John Doe is no longer the CEO of X on January 1, 2026.",
                day(2026, 1, 5),
            ),
        ];
        let batches = group_by_observation(docs, Granularity::Day);
        let outcome = pipeline.run_stream(&batches, Tkg::new()).unwrap();
        assert_eq!(outcome.dtkg.relations.len(), 1);
        let r = &outcome.dtkg.relations[0];
        assert_eq!(r.predicate, "is_ceo");
        assert_eq!(r.t_start.as_slice(), &[day(2025, 1, 1)]);
        assert_eq!(r.t_end.as_slice(), &[day(2026, 1, 1)]);
        assert_eq!(r.t_obs.len(), 2);
    }

    #[test]
    fn bench_on_empty_input_is_zero_facts() {
        let pipeline = mock_pipeline(PipelineConfig::default());
        let report = pipeline.bench(&[]).unwrap();
        assert_eq!(report.n_facts, 0);
        assert_eq!(report.backend, "mock");
        assert_eq!(report.rows().len(), 5);
    }
}
