//! Text embeddings with a persistent cache, plus the similarity kernels the
//! merge engine runs on: plain cosine for predicates and a hybrid
//! name/label combination for entities.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Entity, TemporalRelation};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("embedding contains a non-finite component")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("missing embedding: {context}")]
    MissingEmbedding { context: String },
    #[error("cannot embed an empty string")]
    EmptyText,
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding cache I/O: {0}")]
    CacheIo(String),
    #[error("embedding cache corrupt at line {line}: {reason}")]
    CacheCorrupt { line: usize, reason: String },
    #[error("invalid similarity config: {0}")]
    BadConfig(String),
}

// ---------------------------------------------------------------------------
// Vectors
// ---------------------------------------------------------------------------

/// A unit-normalized embedding. Construction normalizes once; a vector whose
/// norm is already within 1e-6 of one is stored bit-for-bit unchanged so that
/// cache round-trips are byte-stable.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        if (norm - 1.0).abs() <= 1e-6 {
            return Ok(EmbeddingVector(values));
        }
        let scaled = values.iter().map(|v| (*v as f64 / norm) as f32).collect();
        Ok(EmbeddingVector(scaled))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|v| {
            let v = *v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}

/// Cosine similarity ⟨a,b⟩ / (‖a‖‖b‖) in f64.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(cosine_slices(a.as_slice(), b.as_slice()))
}

fn cosine_slices(a: &[f32], b: &[f32]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

// ---------------------------------------------------------------------------
// Similarity configuration and kernels
// ---------------------------------------------------------------------------

/// Weights and thresholds of the hybrid similarity measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub lambda: f64,
    pub beta: f64,
    pub theta_entity: f64,
    pub theta_relation: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            lambda: 0.8,
            beta: 0.2,
            theta_entity: 0.8,
            theta_relation: 0.7,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.lambda)
            || !in_unit(self.beta)
            || !in_unit(self.theta_entity)
            || !in_unit(self.theta_relation)
        {
            return Err(EmbedError::BadConfig(
                "all weights and thresholds must lie in [0, 1]".into(),
            ));
        }
        if (self.lambda + self.beta - 1.0).abs() > 1e-9 {
            return Err(EmbedError::BadConfig(format!(
                "lambda + beta must equal 1, got {}",
                self.lambda + self.beta
            )));
        }
        Ok(())
    }
}

fn require<'a>(
    v: &'a Option<EmbeddingVector>,
    context: &str,
) -> Result<&'a EmbeddingVector, EmbedError> {
    v.as_ref().ok_or_else(|| EmbedError::MissingEmbedding {
        context: context.to_string(),
    })
}

/// Hybrid entity similarity: cosine of λ·name_embedding + β·label_embedding.
/// The combined vectors are not re-normalized; the cosine divides by their
/// norms, so the score is well-defined either way.
pub fn entity_similarity(
    e1: &Entity,
    e2: &Entity,
    cfg: &SimilarityConfig,
) -> Result<f64, EmbedError> {
    let n1 = require(&e1.name_embedding, &format!("name of {}", e1.key()))?;
    let l1 = require(&e1.label_embedding, &format!("label of {}", e1.key()))?;
    let n2 = require(&e2.name_embedding, &format!("name of {}", e2.key()))?;
    let l2 = require(&e2.label_embedding, &format!("label of {}", e2.key()))?;
    let dim = n1.dim();
    for v in [l1, n2, l2] {
        if v.dim() != dim {
            return Err(EmbedError::DimensionMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
    }
    let combine = |name: &EmbeddingVector, label: &EmbeddingVector| -> Vec<f64> {
        name.as_slice()
            .iter()
            .zip(label.as_slice().iter())
            .map(|(n, l)| cfg.lambda * *n as f64 + cfg.beta * *l as f64)
            .collect()
    };
    Ok(cosine_f64(&combine(n1, l1), &combine(n2, l2)))
}

fn cosine_f64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Predicate-name similarity: cosine of the two predicate embeddings only;
/// endpoints and timestamps are ignored.
pub fn relation_similarity(
    r1: &TemporalRelation,
    r2: &TemporalRelation,
) -> Result<f64, EmbedError> {
    let a = require(
        &r1.predicate_embedding,
        &format!("predicate of {}", r1.describe()),
    )?;
    let b = require(
        &r2.predicate_embedding,
        &format!("predicate of {}", r2.describe()),
    )?;
    cosine(a, b)
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

/// Raw vector source. Implementations must be deterministic per
/// (provider id, model id, text) for cache coherence.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Deterministic test provider: hashes text onto the unit sphere, with an
/// explicit synonym table that pulls listed terms close together so that
/// threshold behavior can be exercised without a live service.
pub struct MockEmbeddingProvider {
    dim: usize,
    synonyms: HashMap<String, String>,
}

impl MockEmbeddingProvider {
    pub fn new() -> Self {
        MockEmbeddingProvider::with_groups(32, &[&["owns", "possesses", "has"]])
    }

    pub fn with_groups(dim: usize, groups: &[&[&str]]) -> Self {
        let mut synonyms = HashMap::new();
        for group in groups {
            if let Some(head) = group.first() {
                for term in *group {
                    synonyms.insert((*term).to_string(), format!("synonym-group:{head}"));
                }
            }
        }
        MockEmbeddingProvider { dim, synonyms }
    }

    fn hash_vector(&self, text: &str) -> Vec<f64> {
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Box-Muller keeps the sampling independent of distribution-crate
        // internals, so cached vectors stay stable across dependency bumps.
        let mut values = Vec::with_capacity(self.dim);
        while values.len() < self.dim {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let radius = (-2.0 * u1.ln()).sqrt();
            let angle = 2.0 * std::f64::consts::PI * u2;
            values.push(radius * angle.cos());
            if values.len() < self.dim {
                values.push(radius * angle.sin());
            }
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        values.iter().map(|v| v / norm).collect()
    }
}

impl Default for MockEmbeddingProvider {
    fn default() -> Self {
        MockEmbeddingProvider::new()
    }
}

impl EmbeddingProvider for MockEmbeddingProvider {
    fn provider_id(&self) -> &str {
        "mock"
    }

    fn model_id(&self) -> &str {
        "hash-sphere-v1"
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts
            .iter()
            .map(|text| {
                let base = match self.synonyms.get(text.as_str()) {
                    Some(group) => {
                        let g = self.hash_vector(group);
                        let h = self.hash_vector(text);
                        g.iter()
                            .zip(h.iter())
                            .map(|(g, h)| 0.97 * g + 0.03 * h)
                            .collect::<Vec<f64>>()
                    }
                    None => self.hash_vector(text),
                };
                base.iter().map(|v| *v as f32).collect()
            })
            .collect())
    }
}

/// Embedding service over HTTP+JSON (`input` array in, `data[].embedding`
/// out), with the same retry classes as the completion backend.
pub struct LiveEmbeddingProvider {
    endpoint: String,
    model_id: String,
    api_key: String,
    retry: crate::gateway::RetryPolicy,
    transport: Box<dyn crate::gateway::HttpTransport>,
}

impl LiveEmbeddingProvider {
    pub fn new(
        endpoint: impl Into<String>,
        model_id: impl Into<String>,
        api_key: impl Into<String>,
        retry: crate::gateway::RetryPolicy,
        transport: Box<dyn crate::gateway::HttpTransport>,
    ) -> Self {
        LiveEmbeddingProvider {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            api_key: api_key.into(),
            retry,
            transport,
        }
    }

    /// Reads `ATOM_EMBED_ENDPOINT`, `ATOM_EMBED_MODEL_ID`, and the API key
    /// from `key_env_var`.
    pub fn from_env(key_env_var: &str) -> Result<Self, EmbedError> {
        let endpoint = std::env::var("ATOM_EMBED_ENDPOINT")
            .ok()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| EmbedError::Provider("ATOM_EMBED_ENDPOINT is not set".into()))?;
        let model_id = std::env::var("ATOM_EMBED_MODEL_ID")
            .ok()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| EmbedError::Provider("ATOM_EMBED_MODEL_ID is not set".into()))?;
        let api_key = std::env::var(key_env_var)
            .ok()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| EmbedError::Provider(format!("{key_env_var} is not set")))?;
        Ok(LiveEmbeddingProvider::new(
            endpoint,
            model_id,
            api_key,
            crate::gateway::RetryPolicy::default(),
            Box::new(crate::gateway::ReqwestTransport::new()),
        ))
    }
}

impl EmbeddingProvider for LiveEmbeddingProvider {
    fn provider_id(&self) -> &str {
        "live"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let body = serde_json::json!({ "model": self.model_id, "input": texts });
        let max_attempts = self.retry.max_attempts.max(1);
        let mut last_failure = String::new();
        for attempt in 1..=max_attempts {
            match self.transport.post_json(&self.endpoint, &self.api_key, &body) {
                Ok(reply) if reply.status == 200 => {
                    let value: serde_json::Value = serde_json::from_str(&reply.body)
                        .map_err(|e| EmbedError::Provider(format!("bad reply JSON: {e}")))?;
                    let data = value["data"].as_array().ok_or_else(|| {
                        EmbedError::Provider("reply has no data array".into())
                    })?;
                    if data.len() != texts.len() {
                        return Err(EmbedError::Provider(format!(
                            "reply has {} vectors for {} inputs",
                            data.len(),
                            texts.len()
                        )));
                    }
                    return data
                        .iter()
                        .map(|item| {
                            item["embedding"]
                                .as_array()
                                .ok_or_else(|| {
                                    EmbedError::Provider("item has no embedding".into())
                                })?
                                .iter()
                                .map(|v| {
                                    v.as_f64().map(|f| f as f32).ok_or_else(|| {
                                        EmbedError::Provider("non-numeric component".into())
                                    })
                                })
                                .collect()
                        })
                        .collect();
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    last_failure = format!("HTTP {}", reply.status);
                }
                Ok(reply) => {
                    return Err(EmbedError::Provider(format!(
                        "HTTP {}: {}",
                        reply.status,
                        reply.body.chars().take(200).collect::<String>()
                    )));
                }
                Err(transport) => last_failure = transport,
            }
            if attempt < max_attempts {
                let backoff = self.retry.base_backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(std::time::Duration::from_millis(backoff));
            }
        }
        Err(EmbedError::Provider(format!(
            "retries exhausted after {max_attempts} attempts: {last_failure}"
        )))
    }
}

// ---------------------------------------------------------------------------
// Cached embedder
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    model_id: String,
    dim: usize,
    vector: String,
}

/// Embedding front-end with an append-only file cache keyed by
/// (provider id, model id, SHA-256 of text). Cache hits never call the
/// provider; all returned vectors are unit-normalized.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    entries: RwLock<HashMap<String, Vec<f32>>>,
    log: Option<Mutex<File>>,
    expected_dim: Mutex<Option<usize>>,
}

impl Embedder {
    /// In-memory cache only.
    pub fn in_memory(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Embedder {
            provider,
            entries: RwLock::new(HashMap::new()),
            log: None,
            expected_dim: Mutex::new(None),
        }
    }

    /// File-backed cache; loads existing records and appends new ones.
    pub fn open(provider: Arc<dyn EmbeddingProvider>, path: &Path) -> Result<Self, EmbedError> {
        let mut entries = HashMap::new();
        let mut expected_dim = None;
        if path.exists() {
            let file = File::open(path).map_err(|e| EmbedError::CacheIo(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| EmbedError::CacheIo(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord =
                    serde_json::from_str(&line).map_err(|e| EmbedError::CacheCorrupt {
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(&record.vector)
                    .map_err(|e| EmbedError::CacheCorrupt {
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                if bytes.len() != record.dim * 4 {
                    return Err(EmbedError::CacheCorrupt {
                        line: i + 1,
                        reason: "vector length disagrees with dim".into(),
                    });
                }
                let values: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let own_prefix = format!("{}/{}/", provider.provider_id(), provider.model_id());
                if record.key.starts_with(&own_prefix) {
                    if let Some(expected) = expected_dim {
                        if expected != record.dim {
                            return Err(EmbedError::DimensionMismatch {
                                expected,
                                found: record.dim,
                            });
                        }
                    } else {
                        expected_dim = Some(record.dim);
                    }
                }
                entries.insert(record.key, values);
            }
        } else if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| EmbedError::CacheIo(e.to_string()))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| EmbedError::CacheIo(e.to_string()))?;
        Ok(Embedder {
            provider,
            entries: RwLock::new(entries),
            log: Some(Mutex::new(file)),
            expected_dim: Mutex::new(expected_dim),
        })
    }

    pub fn cache_path_default() -> PathBuf {
        PathBuf::from(".atom-cache/embeddings.jsonl")
    }

    fn cache_key(&self, text: &str) -> String {
        let digest = Sha256::digest(text.as_bytes());
        format!(
            "{}/{}/{:x}",
            self.provider.provider_id(),
            self.provider.model_id(),
            digest
        )
    }

    /// Embeds a batch; output is positionally aligned with the input.
    /// Duplicate texts and cache hits collapse into a single provider call
    /// for the remaining misses.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if texts.iter().any(|t| t.is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let keys: Vec<String> = texts.iter().map(|t| self.cache_key(t)).collect();

        let mut misses: Vec<String> = Vec::new();
        let mut miss_keys: Vec<String> = Vec::new();
        {
            let entries = self.entries.read().expect("cache lock poisoned");
            let mut seen = HashMap::new();
            for (text, key) in texts.iter().zip(keys.iter()) {
                if entries.contains_key(key) || seen.contains_key(key) {
                    continue;
                }
                seen.insert(key.clone(), ());
                misses.push(text.clone());
                miss_keys.push(key.clone());
            }
        }

        if !misses.is_empty() {
            let raw = self.provider.embed_batch(&misses)?;
            if raw.len() != misses.len() {
                return Err(EmbedError::Provider(format!(
                    "provider returned {} vectors for {} texts",
                    raw.len(),
                    misses.len()
                )));
            }
            let mut fresh = Vec::with_capacity(raw.len());
            for values in raw {
                let vector = EmbeddingVector::new(values)?;
                let mut expected = self.expected_dim.lock().expect("dim lock poisoned");
                match *expected {
                    None => *expected = Some(vector.dim()),
                    Some(dim) if dim != vector.dim() => {
                        return Err(EmbedError::DimensionMismatch {
                            expected: dim,
                            found: vector.dim(),
                        });
                    }
                    _ => {}
                }
                fresh.push(vector);
            }
            let mut entries = self.entries.write().expect("cache lock poisoned");
            for (key, vector) in miss_keys.iter().zip(fresh.iter()) {
                entries.insert(key.clone(), vector.as_slice().to_vec());
                if let Some(log) = &self.log {
                    let bytes: Vec<u8> = vector
                        .as_slice()
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect();
                    let record = CacheRecord {
                        key: key.clone(),
                        model_id: self.provider.model_id().to_string(),
                        dim: vector.dim(),
                        vector: base64::engine::general_purpose::STANDARD.encode(bytes),
                    };
                    let mut file = log.lock().expect("cache file lock poisoned");
                    let line =
                        serde_json::to_string(&record).expect("cache record serializes");
                    writeln!(file, "{line}").map_err(|e| EmbedError::CacheIo(e.to_string()))?;
                }
            }
        }

        let entries = self.entries.read().expect("cache lock poisoned");
        keys.iter()
            .map(|key| {
                let values = entries
                    .get(key)
                    .expect("every requested key was filled above");
                EmbeddingVector::new(values.clone())
            })
            .collect()
    }

    /// Embeds one text.
    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }
}
