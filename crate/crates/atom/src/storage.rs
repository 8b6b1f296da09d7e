//! Graph serialization and corpus file handling.
//!
//! Graph documents are JSON with integer UNIX timestamps, a fixed field
//! order, and canonically sorted entities and relations, so saving the same
//! graph twice produces byte-identical files. Writes go through a temp file
//! and rename.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbedError, EmbeddingVector};
use crate::extraction::{AtomicFact, Document, ExtractError};
use crate::model::{Entity, EntityKey, TemporalRelation, TimeList, Timestamp, Tkg, Violation};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("I/O on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("unsupported graph format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("graph failed validation: {} violation(s), first: {first}", violations.len())]
    Validation {
        violations: Vec<Violation>,
        first: String,
    },
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error(transparent)]
    Document(#[from] ExtractError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StorageError {
    StorageError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> StorageError {
    StorageError::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Graph documents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KeyRecord {
    name: String,
    label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntityRecord {
    name: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name_embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_embedding: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RelationRecord {
    subject: KeyRecord,
    predicate: String,
    object: KeyRecord,
    t_start: Vec<i64>,
    t_end: Vec<i64>,
    t_obs: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicate_embedding: Option<Vec<f32>>,
}

/// On-disk shape of a [`Tkg`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDocument {
    format_version: u32,
    entities: Vec<EntityRecord>,
    relations: Vec<RelationRecord>,
}

impl GraphDocument {
    pub fn from_tkg(tkg: &Tkg, include_embeddings: bool) -> Self {
        let mut canonical = tkg.clone();
        canonical.canonicalize();
        let embed = |v: &Option<EmbeddingVector>| -> Option<Vec<f32>> {
            if include_embeddings {
                v.as_ref().map(|e| e.as_slice().to_vec())
            } else {
                None
            }
        };
        GraphDocument {
            format_version: FORMAT_VERSION,
            entities: canonical
                .entities
                .iter()
                .map(|e| EntityRecord {
                    name: e.name.clone(),
                    label: e.label.clone(),
                    name_embedding: embed(&e.name_embedding),
                    label_embedding: embed(&e.label_embedding),
                })
                .collect(),
            relations: canonical
                .relations
                .iter()
                .map(|r| RelationRecord {
                    subject: KeyRecord {
                        name: r.subject.name.clone(),
                        label: r.subject.label.clone(),
                    },
                    predicate: r.predicate.clone(),
                    object: KeyRecord {
                        name: r.object.name.clone(),
                        label: r.object.label.clone(),
                    },
                    t_start: r.t_start.iter().map(Timestamp::as_unix).collect(),
                    t_end: r.t_end.iter().map(Timestamp::as_unix).collect(),
                    t_obs: r.t_obs.iter().map(Timestamp::as_unix).collect(),
                    predicate_embedding: embed(&r.predicate_embedding),
                })
                .collect(),
        }
    }

    pub fn into_tkg(self) -> Result<Tkg, StorageError> {
        if self.format_version != FORMAT_VERSION {
            return Err(StorageError::UnsupportedVersion {
                found: self.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let vector = |v: Option<Vec<f32>>| -> Result<Option<EmbeddingVector>, StorageError> {
            v.map(EmbeddingVector::new).transpose().map_err(Into::into)
        };
        let mut entities = Vec::with_capacity(self.entities.len());
        for record in self.entities {
            entities.push(Entity {
                name: record.name,
                label: record.label,
                name_embedding: vector(record.name_embedding)?,
                label_embedding: vector(record.label_embedding)?,
            });
        }
        let times =
            |values: Vec<i64>| TimeList::from_timestamps(values.into_iter().map(Timestamp::from_unix));
        let mut relations = Vec::with_capacity(self.relations.len());
        for record in self.relations {
            relations.push(TemporalRelation {
                subject: EntityKey::new(record.subject.name, record.subject.label),
                predicate: record.predicate,
                object: EntityKey::new(record.object.name, record.object.label),
                t_start: times(record.t_start),
                t_end: times(record.t_end),
                t_obs: times(record.t_obs),
                predicate_embedding: vector(record.predicate_embedding)?,
            });
        }
        let raw = Tkg {
            entities,
            relations,
        };
        let violations = raw.validate();
        if !violations.is_empty() {
            let first = violations[0].to_string();
            return Err(StorageError::Validation { violations, first });
        }
        let mut tkg = raw;
        tkg.canonicalize();
        Ok(tkg)
    }
}

/// Renders the deterministic byte content written by [`save_graph`].
pub fn render_graph(tkg: &Tkg, include_embeddings: bool) -> String {
    let document = GraphDocument::from_tkg(tkg, include_embeddings);
    let mut text = serde_json::to_string_pretty(&document).expect("graph documents serialize");
    text.push('\n');
    text
}

pub fn save_graph(tkg: &Tkg, path: &Path, include_embeddings: bool) -> Result<(), StorageError> {
    write_atomic(path, render_graph(tkg, include_embeddings).as_bytes())
}

pub fn load_graph(path: &Path) -> Result<Tkg, StorageError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let document: GraphDocument =
        serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    document.into_tkg()
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Corpus and fact files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    doc_id: String,
    text: String,
    observed_at: serde_json::Value,
}

/// Corpus JSONL: one document per line, `observed_at` as ISO-8601 text or a
/// UNIX integer.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, StorageError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut documents = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, format!("line {}: {e}", i + 1)))?;
        let observed_at = parse_observed(&record.observed_at)
            .map_err(|reason| parse_err(path, format!("line {}: {reason}", i + 1)))?;
        documents.push(Document::new(record.doc_id, record.text, observed_at)?);
    }
    Ok(documents)
}

fn parse_observed(value: &serde_json::Value) -> Result<Timestamp, String> {
    match value {
        serde_json::Value::Number(n) => n
            .as_i64()
            .map(Timestamp::from_unix)
            .ok_or_else(|| format!("observed_at {n} is not an integer")),
        serde_json::Value::String(s) => {
            Timestamp::parse(s).map_err(|e| format!("observed_at: {e}"))
        }
        other => Err(format!("observed_at has unsupported type: {other}")),
    }
}

pub fn save_corpus(documents: &[Document], path: &Path) -> Result<(), StorageError> {
    let mut out = String::new();
    for doc in documents {
        let record = CorpusRecord {
            doc_id: doc.doc_id.clone(),
            text: doc.text.clone(),
            observed_at: serde_json::Value::from(doc.observed_at.as_unix()),
        };
        out.push_str(&serde_json::to_string(&record).expect("corpus records serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Atomic facts as JSONL, one fact per line.
pub fn save_facts(facts: &[AtomicFact], path: &Path) -> Result<(), StorageError> {
    let mut out = String::new();
    for fact in facts {
        out.push_str(&serde_json::to_string(fact).expect("facts serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_facts(path: &Path) -> Result<Vec<AtomicFact>, StorageError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut facts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fact: AtomicFact = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, format!("line {}: {e}", i + 1)))?;
        facts.push(fact);
    }
    Ok(facts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedder, MockEmbeddingProvider};
    use std::sync::Arc;

    fn day(y: i32, m: u32, d: u32) -> Timestamp {
        Timestamp::from_ymd(y, m, d).unwrap()
    }

    fn sample_graph() -> Tkg {
        let embedder = Embedder::in_memory(Arc::new(MockEmbeddingProvider::new()));
        let a = Entity::new("a", "thing").unwrap().with_embeddings(
            embedder.embed_one("a").unwrap(),
            embedder.embed_one("thing").unwrap(),
        );
        let b = Entity::new("b", "thing").unwrap().with_embeddings(
            embedder.embed_one("b").unwrap(),
            embedder.embed_one("thing").unwrap(),
        );
        let mut r = TemporalRelation::new(a.key(), "touches", b.key()).unwrap();
        r.t_start = TimeList::from_timestamps([day(2020, 1, 1)]);
        r.t_obs = TimeList::from_timestamps([day(2020, 1, 2)]);
        r.predicate_embedding = Some(embedder.embed_one("touches").unwrap());
        Tkg::from_parts(vec![a, b], vec![r])
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        let graph = sample_graph();
        save_graph(&graph, &path, true).unwrap();
        let loaded = load_graph(&path).unwrap();
        assert_eq!(loaded, graph);
    }

    #[test]
    fn saving_without_embeddings_projects_them_away() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.json");
        let graph = sample_graph();
        save_graph(&graph, &path, false).unwrap();
        let loaded = load_graph(&path).unwrap();
        assert_eq!(loaded.entities.len(), graph.entities.len());
        assert_eq!(loaded.relations.len(), graph.relations.len());
        assert!(loaded.entities.iter().all(|e| e.name_embedding.is_none()));
        let mut stripped = graph.clone();
        for e in &mut stripped.entities {
            e.name_embedding = None;
            e.label_embedding = None;
        }
        for r in &mut stripped.relations {
            r.predicate_embedding = None;
        }
        assert_eq!(loaded, stripped);
    }

    #[test]
    fn same_graph_saves_to_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        let graph = sample_graph();
        save_graph(&graph, &a, true).unwrap();
        save_graph(&graph, &b, true).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn empty_graph_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        save_graph(&Tkg::new(), &path, true).unwrap();
        assert!(load_graph(&path).unwrap().is_empty());
    }

    #[test]
    fn dangling_endpoint_fails_validation_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let text = r#"{
  "format_version": 1,
  "entities": [{"name": "a", "label": "thing"}],
  "relations": [{
    "subject": {"name": "a", "label": "thing"},
    "predicate": "touches",
    "object": {"name": "ghost", "label": "thing"},
    "t_start": [], "t_end": [], "t_obs": [1577923200]
  }]
}"#;
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_graph(&path),
            Err(StorageError::Validation { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.json");
        fs::write(
            &path,
            r#"{"format_version": 9, "entities": [], "relations": []}"#,
        )
        .unwrap();
        assert!(matches!(
            load_graph(&path),
            Err(StorageError::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn corpus_accepts_iso_and_unix_observed_at() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        fs::write(
            &path,
            "{\"doc_id\":\"d1\",\"text\":\"a | p | b\",\"observed_at\":\"2020-03-01\"}\n\
             {\"doc_id\":\"d2\",\"text\":\"c | p | d\",\"observed_at\":1583020800}\n",
        )
        .unwrap();
        let docs = load_corpus(&path).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].observed_at, day(2020, 3, 1));
        assert_eq!(docs[1].observed_at, day(2020, 3, 1));
    }

    #[test]
    fn facts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("facts.jsonl");
        let facts = vec![AtomicFact {
            fact_id: "d1#c0#f0".into(),
            text: "a | p | b".into(),
            observed_at: day(2021, 5, 5),
            doc_id: "d1".into(),
            chunk_index: 0,
        }];
        save_facts(&facts, &path).unwrap();
        assert_eq!(load_facts(&path).unwrap(), facts);
    }
}
