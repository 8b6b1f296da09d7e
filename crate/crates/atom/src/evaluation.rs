//! Extraction quality metrics: factual and temporal match/omission/
//! hallucination classification, their rates, run-to-run stability, and
//! pairwise-cluster scores for entity and relation resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder, SimilarityConfig};
use crate::embedding::{EmbedError, EmbeddingVector};
use crate::model::{normalize_name, ModelError, TemporalRelation, TimeList, Timestamp, Tkg};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("stability is undefined for an empty run")]
    EmptyRun,
    #[error("{kind} mention {mention:?} has no gold cluster label")]
    UnlabeledMention { kind: &'static str, mention: String },
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("gold file {path}: {reason}")]
    Gold { path: String, reason: String },
}

// ---------------------------------------------------------------------------
// Tuples
// ---------------------------------------------------------------------------

/// A 5-tuple in evaluation form: normalized strings plus the two validity
/// lists. Observation time does not participate in quality metrics.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvalTuple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub t_start: TimeList,
    pub t_end: TimeList,
}

impl EvalTuple {
    pub fn new(
        subject: &str,
        predicate: &str,
        object: &str,
        t_start: TimeList,
        t_end: TimeList,
    ) -> Result<Self, ModelError> {
        Ok(EvalTuple {
            subject: normalize_name(subject)?,
            predicate: normalize_name(predicate)?,
            object: normalize_name(object)?,
            t_start,
            t_end,
        })
    }

    pub fn from_relation(relation: &TemporalRelation) -> Self {
        EvalTuple {
            subject: relation.subject.name.clone(),
            predicate: relation.predicate.clone(),
            object: relation.object.name.clone(),
            t_start: relation.t_start.clone(),
            t_end: relation.t_end.clone(),
        }
    }

    pub fn factual_key(&self) -> (String, String, String) {
        (
            self.subject.clone(),
            self.predicate.clone(),
            self.object.clone(),
        )
    }

    /// Canonical rendering embedded for the stability score. Timestamps are
    /// UNIX integers so the text is unambiguous.
    pub fn canonical_text(&self) -> String {
        let join = |list: &TimeList| {
            list.iter()
                .map(|t| t.as_unix().to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{} {} {} start=[{}] end=[{}]",
            self.subject,
            self.predicate,
            self.object,
            join(&self.t_start),
            join(&self.t_end)
        )
    }
}

/// All tuples of a graph in evaluation form.
pub fn tuples_of(tkg: &Tkg) -> Vec<EvalTuple> {
    tkg.relations.iter().map(EvalTuple::from_relation).collect()
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum MatchMode {
    /// Exact normalized (subject, predicate, object) equality. The default;
    /// keeps the metric auditable.
    Exact,
    /// Adds embedding-similarity credit for near-paraphrase triples whose
    /// canonical texts score at or above the threshold.
    Similarity { threshold: f64 },
}

impl Default for MatchMode {
    fn default() -> Self {
        MatchMode::Exact
    }
}

impl MatchMode {
    pub fn describe(&self) -> String {
        match self {
            MatchMode::Exact => "exact".to_string(),
            MatchMode::Similarity { threshold } => format!("similarity({threshold})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct EvalCounts {
    pub matched: usize,
    pub omitted: usize,
    pub hallucinated: usize,
    pub matched_t: usize,
    pub omitted_t: usize,
    pub hallucinated_t: usize,
}

/// Factual matches are pairs (extracted, gold); each factual match lands in
/// exactly one temporal bucket, so the temporal counts partition the matches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Classification {
    pub matched: Vec<(EvalTuple, EvalTuple)>,
    pub omitted: Vec<EvalTuple>,
    pub hallucinated: Vec<EvalTuple>,
    pub matched_t: Vec<(EvalTuple, EvalTuple)>,
    pub omitted_t: Vec<(EvalTuple, EvalTuple)>,
    pub hallucinated_t: Vec<(EvalTuple, EvalTuple)>,
}

impl Classification {
    pub fn counts(&self) -> EvalCounts {
        EvalCounts {
            matched: self.matched.len(),
            omitted: self.omitted.len(),
            hallucinated: self.hallucinated.len(),
            matched_t: self.matched_t.len(),
            omitted_t: self.omitted_t.len(),
            hallucinated_t: self.hallucinated_t.len(),
        }
    }
}

/// Collapses tuples sharing a factual key into one tuple whose time lists
/// are the unions, so each side contributes one 5-tuple per distinct fact.
fn canonical_by_key(tuples: &[EvalTuple]) -> BTreeMap<(String, String, String), EvalTuple> {
    let mut out: BTreeMap<(String, String, String), EvalTuple> = BTreeMap::new();
    for tuple in tuples {
        out.entry(tuple.factual_key())
            .and_modify(|existing| {
                existing.t_start.merge_from(&tuple.t_start);
                existing.t_end.merge_from(&tuple.t_end);
            })
            .or_insert_with(|| tuple.clone());
    }
    out
}

fn is_subset(inner: &TimeList, outer: &TimeList) -> bool {
    inner.iter().all(|t| outer.contains(t))
}

/// Exact-match classification.
pub fn classify(extracted: &[EvalTuple], gold: &[EvalTuple]) -> Classification {
    classify_with_mode(extracted, gold, MatchMode::Exact, None)
        .expect("exact mode cannot fail")
}

/// Classification with a selectable factual matcher. `Similarity` mode needs
/// an embedder for the paraphrase fallback.
pub fn classify_with_mode(
    extracted: &[EvalTuple],
    gold: &[EvalTuple],
    mode: MatchMode,
    embedder: Option<&Embedder>,
) -> Result<Classification, EvalError> {
    let extracted = canonical_by_key(extracted);
    let gold = canonical_by_key(gold);

    let mut pairs: Vec<(EvalTuple, EvalTuple)> = Vec::new();
    let mut unmatched_extracted: Vec<EvalTuple> = Vec::new();
    for (key, tuple) in &extracted {
        match gold.get(key) {
            Some(gold_tuple) => pairs.push((tuple.clone(), gold_tuple.clone())),
            None => unmatched_extracted.push(tuple.clone()),
        }
    }
    let mut unmatched_gold: Vec<EvalTuple> = gold
        .iter()
        .filter(|(key, _)| !extracted.contains_key(*key))
        .map(|(_, tuple)| tuple.clone())
        .collect();

    if let MatchMode::Similarity { threshold } = mode {
        let embedder = embedder.ok_or(EmbedError::MissingEmbedding {
            context: "similarity matching requires an embedder".into(),
        })?;
        let triple_text =
            |t: &EvalTuple| format!("{} {} {}", t.subject, t.predicate, t.object);
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        if !unmatched_extracted.is_empty() && !unmatched_gold.is_empty() {
            let extracted_vectors: Vec<EmbeddingVector> = {
                let texts: Vec<String> =
                    unmatched_extracted.iter().map(&triple_text).collect();
                embedder.embed(&texts)?
            };
            let gold_vectors: Vec<EmbeddingVector> = {
                let texts: Vec<String> = unmatched_gold.iter().map(&triple_text).collect();
                embedder.embed(&texts)?
            };
            for (i, ev) in extracted_vectors.iter().enumerate() {
                for (j, gv) in gold_vectors.iter().enumerate() {
                    let score = cosine(ev, gv)?;
                    if score >= threshold {
                        candidates.push((score, i, j));
                    }
                }
            }
        }
        // Best pairs first; index order breaks ties deterministically.
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut extracted_taken = vec![false; unmatched_extracted.len()];
        let mut gold_taken = vec![false; unmatched_gold.len()];
        for (_, i, j) in candidates {
            if extracted_taken[i] || gold_taken[j] {
                continue;
            }
            extracted_taken[i] = true;
            gold_taken[j] = true;
            pairs.push((unmatched_extracted[i].clone(), unmatched_gold[j].clone()));
        }
        unmatched_extracted = unmatched_extracted
            .into_iter()
            .zip(extracted_taken)
            .filter(|(_, taken)| !taken)
            .map(|(t, _)| t)
            .collect();
        unmatched_gold = unmatched_gold
            .into_iter()
            .zip(gold_taken)
            .filter(|(_, taken)| !taken)
            .map(|(t, _)| t)
            .collect();
    }

    let mut classification = Classification {
        omitted: unmatched_gold,
        hallucinated: unmatched_extracted,
        ..Classification::default()
    };
    for (extracted_tuple, gold_tuple) in pairs {
        let pair = (extracted_tuple.clone(), gold_tuple.clone());
        if extracted_tuple.t_start == gold_tuple.t_start
            && extracted_tuple.t_end == gold_tuple.t_end
        {
            classification.matched_t.push(pair.clone());
        } else if !is_subset(&gold_tuple.t_start, &extracted_tuple.t_start)
            || !is_subset(&gold_tuple.t_end, &extracted_tuple.t_end)
        {
            // Gold temporal values the extraction failed to reproduce.
            classification.omitted_t.push(pair.clone());
        } else {
            // Extraction reproduced all gold values and added some of its own.
            classification.hallucinated_t.push(pair.clone());
        }
        classification.matched.push(pair);
    }
    Ok(classification)
}

// ---------------------------------------------------------------------------
// Rates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Rates {
    pub r_match: f64,
    pub r_om: f64,
    pub r_hall: f64,
    pub r_match_t: f64,
    pub r_om_t: f64,
    pub r_hall_t: f64,
    /// MATCH+OM was zero; the match-type rates were reported as 1 and the
    /// omission-type rates as 0 by convention.
    pub degenerate_factual: bool,
    /// MATCH+HALL was zero; the hallucination rate was reported as 0.
    pub degenerate_hallucination: bool,
}

pub fn rates(counts: &EvalCounts) -> Rates {
    let mut out = Rates::default();
    let factual_denominator = counts.matched + counts.omitted;
    if factual_denominator == 0 {
        out.r_match = 1.0;
        out.r_om = 0.0;
        out.r_match_t = 1.0;
        out.r_om_t = 0.0;
        out.degenerate_factual = true;
    } else {
        let d = factual_denominator as f64;
        out.r_match = counts.matched as f64 / d;
        out.r_om = counts.omitted as f64 / d;
        out.r_match_t = counts.matched_t as f64 / d;
        out.r_om_t = counts.omitted_t as f64 / d;
    }
    out.r_hall_t = out.r_match - out.r_match_t - out.r_om_t;
    let hallucination_denominator = counts.matched + counts.hallucinated;
    if hallucination_denominator == 0 {
        out.r_hall = 0.0;
        out.degenerate_hallucination = true;
    } else {
        out.r_hall = counts.hallucinated as f64 / hallucination_denominator as f64;
    }
    out
}

// ---------------------------------------------------------------------------
// Stability
// ---------------------------------------------------------------------------

/// Cosine similarity between the centroid embeddings of two runs' tuple
/// sets. Each tuple is embedded via its canonical text.
pub fn stability(
    run_base: &[EvalTuple],
    run_r: &[EvalTuple],
    embedder: &Embedder,
) -> Result<f64, EvalError> {
    if run_base.is_empty() || run_r.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let centroid = |run: &[EvalTuple]| -> Result<Vec<f64>, EvalError> {
        let texts: Vec<String> = run.iter().map(EvalTuple::canonical_text).collect();
        let vectors = embedder.embed(&texts)?;
        let dim = vectors[0].dim();
        let mut acc = vec![0.0f64; dim];
        for vector in &vectors {
            for (slot, value) in acc.iter_mut().zip(vector.as_slice()) {
                *slot += *value as f64;
            }
        }
        let n = vectors.len() as f64;
        for slot in acc.iter_mut() {
            *slot /= n;
        }
        Ok(acc)
    };
    let a = centroid(run_base)?;
    let b = centroid(run_r)?;
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

// ---------------------------------------------------------------------------
// Entity / relation resolution scores
// ---------------------------------------------------------------------------

/// Gold 5-tuples plus cluster labels over every mention that occurs in the
/// corpus vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GoldAnnotation {
    pub tuples: Vec<EvalTuple>,
    /// normalized entity mention name → gold cluster id
    pub entity_clusters: BTreeMap<String, String>,
    /// normalized entity mention name → label (defaults to "entity")
    pub entity_labels: BTreeMap<String, String>,
    /// normalized predicate mention → gold cluster id
    pub relation_clusters: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GoldTupleRecord {
    subject: String,
    predicate: String,
    object: String,
    #[serde(default)]
    t_start: Vec<String>,
    #[serde(default)]
    t_end: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GoldRecord {
    doc_id: String,
    #[serde(default)]
    gold_tuples: Vec<GoldTupleRecord>,
    #[serde(default)]
    entity_clusters: BTreeMap<String, String>,
    #[serde(default)]
    entity_labels: BTreeMap<String, String>,
    #[serde(default)]
    relation_clusters: BTreeMap<String, String>,
}

/// Gold JSONL: one record per document with tuples and cluster labels;
/// records accumulate into one annotation.
pub fn load_gold(path: &Path) -> Result<GoldAnnotation, EvalError> {
    let file = std::fs::File::open(path).map_err(|e| EvalError::Gold {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut gold = GoldAnnotation::default();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EvalError::Gold {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GoldRecord = serde_json::from_str(&line).map_err(|e| EvalError::Gold {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        for tuple in record.gold_tuples {
            let parse = |values: &[String]| -> Result<TimeList, EvalError> {
                values
                    .iter()
                    .map(|v| Timestamp::parse(v).map_err(EvalError::from))
                    .collect()
            };
            gold.tuples.push(EvalTuple::new(
                &tuple.subject,
                &tuple.predicate,
                &tuple.object,
                parse(&tuple.t_start)?,
                parse(&tuple.t_end)?,
            )?);
        }
        let normalize_map = |map: BTreeMap<String, String>| -> Result<Vec<(String, String)>, EvalError> {
            map.into_iter()
                .map(|(k, v)| Ok((normalize_name(&k)?, v)))
                .collect()
        };
        for (mention, cluster) in normalize_map(record.entity_clusters)? {
            gold.entity_clusters.insert(mention, cluster);
        }
        for (mention, label) in normalize_map(record.entity_labels)? {
            gold.entity_labels.insert(mention, normalize_name(&label)?);
        }
        for (mention, cluster) in normalize_map(record.relation_clusters)? {
            gold.relation_clusters.insert(mention, cluster);
        }
    }
    gold.tuples.sort();
    gold.tuples.dedup();
    Ok(gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PairwiseScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positive_pairs: usize,
    pub predicted_pairs: usize,
    pub gold_pairs: usize,
}

fn pairwise_scores(predicted: &[String], gold: &[String]) -> PairwiseScores {
    let n = predicted.len();
    let mut tp = 0usize;
    let mut predicted_pairs = 0usize;
    let mut gold_pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let same_predicted = predicted[i] == predicted[j];
            let same_gold = gold[i] == gold[j];
            if same_predicted {
                predicted_pairs += 1;
            }
            if same_gold {
                gold_pairs += 1;
            }
            if same_predicted && same_gold {
                tp += 1;
            }
        }
    }
    let precision = if predicted_pairs == 0 {
        1.0
    } else {
        tp as f64 / predicted_pairs as f64
    };
    let recall = if gold_pairs == 0 {
        1.0
    } else {
        tp as f64 / gold_pairs as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PairwiseScores {
        precision,
        recall,
        f1,
        true_positive_pairs: tp,
        predicted_pairs,
        gold_pairs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ErRrScores {
    pub entity: PairwiseScores,
    pub relation: PairwiseScores,
}

/// Pairwise-cluster precision/recall/F1 for entity resolution and relation
/// resolution.
///
/// The gold annotation labels the mention vocabulary; the predicted
/// clustering of a mention is the graph entity (or predicate) it resolves to
/// under the merge engine's own rule: exact key first, then the similarity
/// argmax over the threshold, else itself. Two mentions are co-clustered in
/// the prediction iff they resolve to the same target.
pub fn er_rr_scores(
    predicted: &Tkg,
    gold: &GoldAnnotation,
    embedder: &Embedder,
    cfg: &SimilarityConfig,
) -> Result<ErRrScores, EvalError> {
    for entity in &predicted.entities {
        if !gold.entity_clusters.contains_key(&entity.name) {
            return Err(EvalError::UnlabeledMention {
                kind: "entity",
                mention: entity.name.clone(),
            });
        }
    }
    let predicted_predicates: BTreeSet<&str> = predicted
        .relations
        .iter()
        .map(|r| r.predicate.as_str())
        .collect();
    for predicate in &predicted_predicates {
        if !gold.relation_clusters.contains_key(*predicate) {
            return Err(EvalError::UnlabeledMention {
                kind: "relation",
                mention: predicate.to_string(),
            });
        }
    }

    // Entity mentions.
    let mentions: Vec<&String> = gold.entity_clusters.keys().collect();
    let mut predicted_assignment: Vec<String> = Vec::with_capacity(mentions.len());
    let mut gold_assignment: Vec<String> = Vec::with_capacity(mentions.len());
    for mention in &mentions {
        gold_assignment.push(gold.entity_clusters[*mention].clone());
        predicted_assignment.push(resolve_entity_mention(mention, predicted, gold, embedder, cfg)?);
    }
    let entity = pairwise_scores(&predicted_assignment, &gold_assignment);

    // Relation-name mentions.
    let mentions: Vec<&String> = gold.relation_clusters.keys().collect();
    let mut predicted_assignment: Vec<String> = Vec::with_capacity(mentions.len());
    let mut gold_assignment: Vec<String> = Vec::with_capacity(mentions.len());
    for mention in &mentions {
        gold_assignment.push(gold.relation_clusters[*mention].clone());
        predicted_assignment.push(resolve_predicate_mention(mention, predicted, embedder, cfg)?);
    }
    let relation = pairwise_scores(&predicted_assignment, &gold_assignment);

    Ok(ErRrScores { entity, relation })
}

fn resolve_entity_mention(
    mention: &str,
    predicted: &Tkg,
    gold: &GoldAnnotation,
    embedder: &Embedder,
    cfg: &SimilarityConfig,
) -> Result<String, EvalError> {
    let label = gold
        .entity_labels
        .get(mention)
        .cloned()
        .unwrap_or_else(|| "entity".to_string());
    let key = crate::model::EntityKey::new(mention.to_string(), label.clone());
    if predicted.contains_entity(&key) {
        return Ok(key.to_string());
    }
    if predicted.entities.is_empty() {
        return Ok(format!("self:{mention}"));
    }
    let probe = crate::model::Entity {
        name: mention.to_string(),
        label: label.clone(),
        name_embedding: Some(embedder.embed_one(mention)?),
        label_embedding: Some(embedder.embed_one(&label)?),
    };
    let mut best_score = f64::NEG_INFINITY;
    let mut best_key: Option<String> = None;
    for candidate in &predicted.entities {
        let score = crate::embedding::entity_similarity(&probe, candidate, cfg)?;
        if score > best_score {
            best_score = score;
            best_key = Some(candidate.key().to_string());
        }
    }
    if best_score >= cfg.theta_entity {
        Ok(best_key.expect("non-empty candidate set"))
    } else {
        Ok(format!("self:{mention}"))
    }
}

fn resolve_predicate_mention(
    mention: &str,
    predicted: &Tkg,
    embedder: &Embedder,
    cfg: &SimilarityConfig,
) -> Result<String, EvalError> {
    let mut seen = BTreeSet::new();
    let mut candidates: Vec<&TemporalRelation> = Vec::new();
    for relation in &predicted.relations {
        if seen.insert(relation.predicate.as_str()) {
            candidates.push(relation);
        }
    }
    if candidates.iter().any(|r| r.predicate == mention) {
        return Ok(mention.to_string());
    }
    if candidates.is_empty() {
        return Ok(format!("self:{mention}"));
    }
    let probe = embedder.embed_one(mention)?;
    let mut best_score = f64::NEG_INFINITY;
    let mut best: Option<&str> = None;
    for candidate in &candidates {
        let embedding =
            candidate
                .predicate_embedding
                .as_ref()
                .ok_or(EmbedError::MissingEmbedding {
                    context: format!("predicate embedding of {}", candidate.predicate),
                })?;
        let score = cosine(&probe, embedding)?;
        if score > best_score {
            best_score = score;
            best = Some(&candidate.predicate);
        }
    }
    if best_score >= cfg.theta_relation {
        Ok(best.expect("non-empty candidate set").to_string())
    } else {
        Ok(format!("self:{mention}"))
    }
}

// ---------------------------------------------------------------------------
// Validity counting and reports
// ---------------------------------------------------------------------------

/// Partitions the 5-tuples of the given atomic graphs by whether they carry
/// any validity time: (with, without).
pub fn count_facts_with_validity(extractions: &[Tkg]) -> (usize, usize) {
    let mut with = 0usize;
    let mut without = 0usize;
    for graph in extractions {
        for relation in &graph.relations {
            if relation.t_start.is_empty() && relation.t_end.is_empty() {
                without += 1;
            } else {
                with += 1;
            }
        }
    }
    (with, without)
}

/// Machine-readable evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub matcher: String,
    pub counts: EvalCounts,
    pub rates: Rates,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stability: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub er_rr: Option<ErRrScores>,
    pub tuples_with_validity: usize,
    pub tuples_without_validity: usize,
    pub config: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingProvider, MockEmbeddingProvider};
    use crate::model::Entity;
    use std::sync::Arc;

    fn day(y: i32, m: u32, d: u32) -> Timestamp {
        Timestamp::from_ymd(y, m, d).unwrap()
    }

    fn tuple(s: &str, p: &str, o: &str, starts: &[Timestamp], ends: &[Timestamp]) -> EvalTuple {
        EvalTuple::new(
            s,
            p,
            o,
            TimeList::from_timestamps(starts.iter().copied()),
            TimeList::from_timestamps(ends.iter().copied()),
        )
        .unwrap()
    }

    #[test]
    fn identical_sets_are_all_match() {
        let tuples = vec![
            tuple("a", "p", "b", &[day(2020, 1, 1)], &[]),
            tuple("c", "q", "d", &[], &[]),
        ];
        let c = classify(&tuples, &tuples);
        let counts = c.counts();
        assert_eq!(counts.matched, 2);
        assert_eq!(counts.matched_t, 2);
        assert_eq!(counts.omitted, 0);
        assert_eq!(counts.hallucinated, 0);
        assert_eq!(counts.omitted_t + counts.hallucinated_t, 0);
    }

    #[test]
    fn gold_only_tuple_is_omission() {
        let gold = vec![tuple("a", "p", "b", &[], &[])];
        let c = classify(&[], &gold);
        assert_eq!(c.counts().omitted, 1);
        assert_eq!(c.counts().matched, 0);
    }

    #[test]
    fn missing_gold_start_time_is_temporal_omission() {
        // Factual match with extracted t_start=[] vs gold t_start=[2020-01-24].
        let extracted = vec![tuple("virus", "killed", "people", &[], &[])];
        let gold = vec![tuple("virus", "killed", "people", &[day(2020, 1, 24)], &[])];
        let c = classify(&extracted, &gold);
        let counts = c.counts();
        assert_eq!(counts.matched, 1);
        assert_eq!(counts.omitted_t, 1);
        assert_eq!(counts.matched_t, 0);
        assert_eq!(counts.hallucinated_t, 0);
    }

    #[test]
    fn extra_extracted_time_is_temporal_hallucination() {
        let extracted = vec![tuple(
            "a",
            "p",
            "b",
            &[day(2020, 1, 1), day(2021, 1, 1)],
            &[],
        )];
        let gold = vec![tuple("a", "p", "b", &[day(2020, 1, 1)], &[])];
        let c = classify(&extracted, &gold);
        assert_eq!(c.counts().hallucinated_t, 1);
    }

    #[test]
    fn swapping_sides_swaps_omission_and_hallucination() {
        let left = vec![
            tuple("a", "p", "b", &[], &[]),
            tuple("x", "q", "y", &[], &[]),
        ];
        let right = vec![
            tuple("a", "p", "b", &[], &[]),
            tuple("m", "r", "n", &[], &[]),
        ];
        let forward = classify(&left, &right).counts();
        let backward = classify(&right, &left).counts();
        assert_eq!(forward.omitted, backward.hallucinated);
        assert_eq!(forward.hallucinated, backward.omitted);
        assert_eq!(forward.matched, backward.matched);
    }

    #[test]
    fn rates_follow_the_formulas() {
        let counts = EvalCounts {
            matched: 3,
            omitted: 1,
            hallucinated: 2,
            matched_t: 2,
            omitted_t: 1,
            hallucinated_t: 0,
        };
        let r = rates(&counts);
        assert!((r.r_match - 0.75).abs() < 1e-12);
        assert!((r.r_om - 0.25).abs() < 1e-12);
        assert!((r.r_hall - 0.4).abs() < 1e-12);
        assert!((r.r_match + r.r_om - 1.0).abs() < 1e-12);
        assert!((r.r_match_t + r.r_om_t + r.r_hall_t - r.r_match).abs() < 1e-12);
    }

    #[test]
    fn zero_denominators_use_the_documented_conventions() {
        let r = rates(&EvalCounts::default());
        assert_eq!(r.r_match, 1.0);
        assert_eq!(r.r_om, 0.0);
        assert_eq!(r.r_hall, 0.0);
        assert!(r.degenerate_factual);
        assert!(r.degenerate_hallucination);
    }

    #[test]
    fn published_f_column_satisfies_the_identity() {
        // R_MATCH 0.720, R_MATCH_t 0.354, R_OM_t 0.366 → R_HALL_t 0.000.
        let r_hall_t: f64 = 0.720 - 0.354 - 0.366;
        assert!(r_hall_t.abs() < 1e-12);
    }

    fn mock_embedder() -> Embedder {
        Embedder::in_memory(Arc::new(MockEmbeddingProvider::new()))
    }

    #[test]
    fn stability_of_identical_runs_is_one() {
        let embedder = mock_embedder();
        let run = vec![
            tuple("a", "p", "b", &[day(2020, 1, 1)], &[]),
            tuple("c", "q", "d", &[], &[]),
        ];
        let s = stability(&run, &run, &embedder).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stability_rejects_empty_runs() {
        let embedder = mock_embedder();
        let run = vec![tuple("a", "p", "b", &[], &[])];
        assert!(matches!(
            stability(&[], &run, &embedder),
            Err(EvalError::EmptyRun)
        ));
    }

    /// Provider that pins specific canonical texts to fixed unit vectors so
    /// centroid arithmetic can be checked by hand.
    struct PinnedProvider;

    impl EmbeddingProvider for PinnedProvider {
        fn provider_id(&self) -> &str {
            "pinned"
        }
        fn model_id(&self) -> &str {
            "toy"
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
            Ok(texts
                .iter()
                .map(|t| {
                    if t.starts_with("a ") {
                        vec![1.0, 0.0]
                    } else if t.starts_with("b ") {
                        vec![0.0, 1.0]
                    } else {
                        vec![1.0, 0.0]
                    }
                })
                .collect())
        }
    }

    #[test]
    fn stability_toy_centroids_match_hand_arithmetic() {
        // Base {A, B} embeds to (1,0), (0,1); the second run duplicates A's
        // direction via a third tuple. cos((.5,.5), (2/3,1/3)) = 3/√10.
        let embedder = Embedder::in_memory(Arc::new(PinnedProvider));
        let base = vec![
            tuple("a", "p", "b", &[], &[]),
            tuple("b", "q", "c", &[], &[]),
        ];
        let run = vec![
            tuple("a", "p", "b", &[], &[]),
            tuple("b", "q", "c", &[], &[]),
            tuple("a", "r", "d", &[], &[]),
        ];
        let s = stability(&base, &run, &embedder).unwrap();
        assert!((s - 3.0 / 10.0f64.sqrt()).abs() < 1e-9, "got {s}");
    }

    fn entity_with_embeddings(embedder: &Embedder, name: &str, label: &str) -> Entity {
        Entity::new(name, label).unwrap().with_embeddings(
            embedder.embed_one(name).unwrap(),
            embedder.embed_one(label).unwrap(),
        )
    }

    #[test]
    fn perfect_clustering_scores_one() {
        let embedder = mock_embedder();
        let a = entity_with_embeddings(&embedder, "usa", "country");
        let b = entity_with_embeddings(&embedder, "france", "country");
        let mut r = TemporalRelation::new(a.key(), "borders", b.key()).unwrap();
        r.predicate_embedding = Some(embedder.embed_one("borders").unwrap());
        let predicted = Tkg::from_parts(vec![a, b], vec![r]);

        let mut gold = GoldAnnotation::default();
        gold.entity_clusters.insert("usa".into(), "c-usa".into());
        gold.entity_clusters
            .insert("france".into(), "c-france".into());
        gold.entity_labels.insert("usa".into(), "country".into());
        gold.entity_labels.insert("france".into(), "country".into());
        gold.relation_clusters
            .insert("borders".into(), "c-borders".into());

        let scores =
            er_rr_scores(&predicted, &gold, &embedder, &SimilarityConfig::default()).unwrap();
        assert_eq!(scores.entity.precision, 1.0);
        assert_eq!(scores.entity.recall, 1.0);
        assert_eq!(scores.entity.f1, 1.0);
        assert_eq!(scores.relation.f1, 1.0);
    }

    #[test]
    fn spurious_merge_among_four_mentions_hand_computed() {
        // Four mentions, gold singletons except m1/m2 which belong together.
        // The prediction wrongly keeps m1 and m2 apart and wrongly merges m3
        // into m4's entity: over C(4,2)=6 pairs, predicted has one positive
        // pair (m3,m4), gold has one positive pair (m1,m2), no overlap.
        let mut gold = GoldAnnotation::default();
        for (mention, cluster) in [("m1", "g12"), ("m2", "g12"), ("m3", "g3"), ("m4", "g4")] {
            gold.entity_clusters
                .insert(mention.to_string(), cluster.to_string());
            gold.entity_labels
                .insert(mention.to_string(), "thing".to_string());
        }

        // m3 is absent from the graph; a synonym table for m3/m4 makes its
        // probe resolve onto m4's entity, the spurious merge under test.
        let synonym_provider = Arc::new(MockEmbeddingProvider::with_groups(
            32,
            &[&["m3", "m4"], &["owns", "possesses", "has"]],
        ));
        let probe_embedder = Embedder::in_memory(synonym_provider);
        let m1 = entity_with_embeddings(&probe_embedder, "m1", "thing");
        let m2 = entity_with_embeddings(&probe_embedder, "m2", "thing");
        let m4 = entity_with_embeddings(&probe_embedder, "m4", "thing");
        let predicted = Tkg::from_parts(vec![m1, m2, m4], vec![]);

        let scores = er_rr_scores(
            &predicted,
            &gold,
            &probe_embedder,
            &SimilarityConfig::default(),
        )
        .unwrap();
        // TP = 0; predicted pairs = 1 (m3,m4); gold pairs = 1 (m1,m2).
        assert_eq!(scores.entity.true_positive_pairs, 0);
        assert_eq!(scores.entity.predicted_pairs, 1);
        assert_eq!(scores.entity.gold_pairs, 1);
        assert_eq!(scores.entity.precision, 0.0);
        assert_eq!(scores.entity.recall, 0.0);
        assert_eq!(scores.entity.f1, 0.0);
    }

    #[test]
    fn unlabeled_mention_is_an_error() {
        let embedder = mock_embedder();
        let a = entity_with_embeddings(&embedder, "mystery", "thing");
        let predicted = Tkg::from_parts(vec![a], vec![]);
        let gold = GoldAnnotation::default();
        assert!(matches!(
            er_rr_scores(&predicted, &gold, &embedder, &SimilarityConfig::default()),
            Err(EvalError::UnlabeledMention { kind: "entity", .. })
        ));
    }

    #[test]
    fn validity_counting_partitions_tuples() {
        let embedder = mock_embedder();
        let a = entity_with_embeddings(&embedder, "a", "thing");
        let b = entity_with_embeddings(&embedder, "b", "thing");
        let mut with_time = TemporalRelation::new(a.key(), "covers", b.key()).unwrap();
        with_time.t_end = TimeList::from_timestamps([day(2026, 1, 1)]);
        let without_time = TemporalRelation::new(a.key(), "touches", b.key()).unwrap();
        let g1 = Tkg::from_parts(vec![a.clone(), b.clone()], vec![with_time]);
        let g2 = Tkg::from_parts(vec![a, b], vec![without_time]);
        assert_eq!(count_facts_with_validity(&[g1, g2]), (1, 1));
        assert_eq!(count_facts_with_validity(&[]), (0, 0));
    }
}
