//! Graph consolidation without model calls.
//!
//! [`binary_merge`] resolves one graph against another in three phases:
//! entity resolution (exact (name, label) match first, then hybrid-similarity
//! argmax over a threshold), relation-name resolution (predicate-embedding
//! similarity regardless of endpoints), and temporal resolution (time-list
//! union for relations with the same resolved endpoints and a similar
//! predicate). [`parallel_merge`] reduces a whole list of graphs by rounds of
//! concurrent pairwise merges, carrying an odd leftover forward.
//!
//! The right-hand graph is the reference: its entity names, predicate names,
//! and embeddings win, which is what lets an established graph keep its
//! canonical vocabulary as new snapshots fold in.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbedError, EmbeddingVector, SimilarityConfig};
use crate::model::{Entity, EntityKey, TemporalRelation, Tkg, Violation};

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("{side} merge input is invalid: {} violation(s), first: {first}", violations.len())]
    InvalidInput {
        side: &'static str,
        violations: Vec<Violation>,
        first: String,
    },
    #[error(transparent)]
    Embedding(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub similarity: SimilarityConfig,
    pub workers: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            similarity: SimilarityConfig::default(),
            workers: 8,
        }
    }
}

impl MergeConfig {
    pub fn theta_entity(&self) -> f64 {
        self.similarity.theta_entity
    }

    pub fn theta_relation(&self) -> f64 {
        self.similarity.theta_relation
    }
}

/// Total map from every left-graph entity key to its key in the merged
/// namespace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntityMapping(pub BTreeMap<EntityKey, EntityKey>);

impl EntityMapping {
    pub fn get<'a>(&'a self, key: &'a EntityKey) -> &'a EntityKey {
        self.0.get(key).unwrap_or(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Instrumentation from one [`parallel_merge_with_stats`] run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MergeStats {
    pub rounds: usize,
    pub binary_merges: usize,
}

// ---------------------------------------------------------------------------
// Entity resolution
// ---------------------------------------------------------------------------

/// λ·name + β·label in f64, with its norm. Computed once per entity per
/// merge; every similarity after that is a single dot product.
fn combined_vector(
    entity: &Entity,
    cfg: &SimilarityConfig,
) -> Result<(Vec<f64>, f64), MergeError> {
    let name = entity
        .name_embedding
        .as_ref()
        .ok_or_else(|| missing(format!("name embedding of {}", entity.key())))?;
    let label = entity
        .label_embedding
        .as_ref()
        .ok_or_else(|| missing(format!("label embedding of {}", entity.key())))?;
    if name.dim() != label.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: name.dim(),
            found: label.dim(),
        }
        .into());
    }
    let values: Vec<f64> = name
        .as_slice()
        .iter()
        .zip(label.as_slice().iter())
        .map(|(n, l)| cfg.lambda * *n as f64 + cfg.beta * *l as f64)
        .collect();
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((values, norm))
}

fn missing(context: String) -> MergeError {
    EmbedError::MissingEmbedding { context }.into()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Maps every left entity into the right graph's namespace: an exact
/// (name, label) match wins unconditionally; otherwise the similarity argmax
/// wins if it clears the entity threshold; otherwise the entity keeps its own
/// key. The merged entity set is the right set plus the unmapped left
/// entities.
pub fn resolve_entities(
    left: &Tkg,
    right: &Tkg,
    cfg: &MergeConfig,
) -> Result<(EntityMapping, Vec<Entity>), MergeError> {
    let mut mapping = BTreeMap::new();
    let mut right_vectors: Option<Vec<(Vec<f64>, f64)>> = None;

    for entity in &left.entities {
        let key = entity.key();
        if right.contains_entity(&key) {
            mapping.insert(key.clone(), key);
            continue;
        }
        if right.entities.is_empty() {
            mapping.insert(key.clone(), key);
            continue;
        }
        if right_vectors.is_none() {
            right_vectors = Some(
                right
                    .entities
                    .iter()
                    .map(|e| combined_vector(e, &cfg.similarity))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
        let candidates = right_vectors.as_ref().unwrap();
        let (own, own_norm) = combined_vector(entity, &cfg.similarity)?;
        let mut best_score = f64::NEG_INFINITY;
        let mut best_index = usize::MAX;
        for (index, (candidate, candidate_norm)) in candidates.iter().enumerate() {
            if candidate.len() != own.len() {
                return Err(EmbedError::DimensionMismatch {
                    expected: own.len(),
                    found: candidate.len(),
                }
                .into());
            }
            let denominator = own_norm * candidate_norm;
            let score = if denominator == 0.0 {
                0.0
            } else {
                dot64(&own, candidate) / denominator
            };
            // Strictly-greater keeps the first candidate in key order on ties.
            if score > best_score {
                best_score = score;
                best_index = index;
            }
        }
        if best_index != usize::MAX && best_score >= cfg.theta_entity() {
            mapping.insert(key, right.entities[best_index].key());
        } else {
            mapping.insert(key.clone(), key);
        }
    }

    let mut merged = right.entities.clone();
    for entity in &left.entities {
        let key = entity.key();
        if mapping[&key] == key && !right.contains_entity(&key) {
            if let Err(pos) = merged.binary_search_by(|e| e.key().cmp(&key)) {
                merged.insert(pos, entity.clone());
            }
        }
    }
    Ok((EntityMapping(mapping), merged))
}

// ---------------------------------------------------------------------------
// Binary merge
// ---------------------------------------------------------------------------

struct PredicateRef<'a> {
    name: &'a str,
    embedding: Option<&'a EmbeddingVector>,
    norm: f64,
}

fn predicate_norm(embedding: Option<&EmbeddingVector>) -> f64 {
    embedding
        .map(|v| {
            v.as_slice()
                .iter()
                .map(|x| {
                    let x = *x as f64;
                    x * x
                })
                .sum::<f64>()
                .sqrt()
        })
        .unwrap_or(0.0)
}

/// Unique predicates in first-appearance (canonical) order, with a name
/// index. Similarity depends only on the predicate, so relations sharing one
/// share every score.
fn unique_predicates(
    relations: &[TemporalRelation],
) -> (Vec<PredicateRef<'_>>, std::collections::HashMap<&str, usize>) {
    let mut refs: Vec<PredicateRef<'_>> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for relation in relations {
        if !index.contains_key(relation.predicate.as_str()) {
            index.insert(relation.predicate.as_str(), refs.len());
            refs.push(PredicateRef {
                name: &relation.predicate,
                embedding: relation.predicate_embedding.as_ref(),
                norm: predicate_norm(relation.predicate_embedding.as_ref()),
            });
        }
    }
    (refs, index)
}

/// Cosine of two predicate embeddings, with an exact-string shortcut: equal
/// predicate names always score 1 (identical text embeds identically).
fn predicate_similarity(
    a_name: &str,
    a_embedding: Option<&EmbeddingVector>,
    a_norm: f64,
    b: &PredicateRef<'_>,
) -> Result<f64, MergeError> {
    if a_name == b.name {
        return Ok(1.0);
    }
    let a_vec = a_embedding.ok_or_else(|| missing(format!("predicate embedding of {a_name}")))?;
    let b_vec = b
        .embedding
        .ok_or_else(|| missing(format!("predicate embedding of {}", b.name)))?;
    if a_vec.dim() != b_vec.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a_vec.dim(),
            found: b_vec.dim(),
        }
        .into());
    }
    let denominator = a_norm * b.norm;
    if denominator == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a_vec
        .as_slice()
        .iter()
        .zip(b_vec.as_slice().iter())
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum();
    Ok(dot / denominator)
}

fn ensure_valid(tkg: &Tkg, side: &'static str) -> Result<(), MergeError> {
    let violations = tkg.validate();
    if violations.is_empty() {
        return Ok(());
    }
    let first = violations[0].to_string();
    Err(MergeError::InvalidInput {
        side,
        violations,
        first,
    })
}

/// Merges `left` into `right`'s namespace and returns the consolidated graph.
pub fn binary_merge(left: &Tkg, right: &Tkg, cfg: &MergeConfig) -> Result<Tkg, MergeError> {
    ensure_valid(left, "left")?;
    ensure_valid(right, "right")?;

    let (mapping, merged_entities) = resolve_entities(left, right, cfg)?;

    // Similarity is a function of the predicate pair alone, so score unique
    // left predicates against unique right predicates once. The per-relation
    // argmax over right relations reduces to an argmax over unique right
    // predicates: equal names tie, and ties keep the earliest candidate in
    // canonical order.
    let (right_preds, right_pred_index) = unique_predicates(&right.relations);
    let (left_preds, left_pred_index) = unique_predicates(&left.relations);
    let mut left_right_sims: Vec<Vec<f64>> = Vec::with_capacity(left_preds.len());
    let mut name_best: Vec<(f64, usize)> = Vec::with_capacity(left_preds.len());
    for lp in &left_preds {
        let mut row = Vec::with_capacity(right_preds.len());
        let mut best_score = f64::NEG_INFINITY;
        let mut best_index = usize::MAX;
        for (rj, rp) in right_preds.iter().enumerate() {
            let score = predicate_similarity(lp.name, lp.embedding, lp.norm, rp)?;
            if score > best_score {
                best_score = score;
                best_index = rj;
            }
            row.push(score);
        }
        left_right_sims.push(row);
        name_best.push((best_score, best_index));
    }
    // Right-vs-right predicate scores are only needed when an adopted name
    // meets a same-endpoint candidate with a different name; memoize those.
    let mut right_right_memo: std::collections::HashMap<(usize, usize), f64> =
        std::collections::HashMap::new();
    let mut right_right_sim = |a: usize, b: usize| -> Result<f64, MergeError> {
        if a == b {
            return Ok(1.0);
        }
        let key = (a.min(b), a.max(b));
        if let Some(score) = right_right_memo.get(&key) {
            return Ok(*score);
        }
        let pa = &right_preds[key.0];
        let pb = &right_preds[key.1];
        let score = predicate_similarity(pa.name, pa.embedding, pa.norm, pb)?;
        right_right_memo.insert(key, score);
        Ok(score)
    };

    // Right relations indexed by endpoint pair for the temporal phase. Their
    // endpoints and predicates never change inside this merge, only their
    // time lists do, so the index stays valid throughout.
    let mut by_endpoints: BTreeMap<(EntityKey, EntityKey), Vec<usize>> = BTreeMap::new();
    for (index, relation) in right.relations.iter().enumerate() {
        by_endpoints
            .entry((relation.subject.clone(), relation.object.clone()))
            .or_default()
            .push(index);
    }

    let mut merged_relations: Vec<TemporalRelation> = right.relations.clone();
    let mut appended: Vec<TemporalRelation> = Vec::new();

    for relation in &left.relations {
        let mut relation = relation.clone();
        relation.subject = mapping.get(&relation.subject).clone();
        relation.object = mapping.get(&relation.object).clone();

        let li = left_pred_index[relation.predicate.as_str()];
        let mut adopted: Option<usize> = None;
        if !right_preds.is_empty() {
            let (best_score, best_index) = name_best[li];
            if best_score >= cfg.theta_relation() {
                relation.predicate = right_preds[best_index].name.to_string();
                relation.predicate_embedding = right_preds[best_index].embedding.cloned();
                adopted = Some(best_index);
            }
        }

        // Temporal resolution: the best same-endpoint right relation whose
        // predicate clears the threshold absorbs this relation's time lists;
        // the relation itself is not appended again.
        let mut absorbed_into: Option<usize> = None;
        if let Some(candidates) =
            by_endpoints.get(&(relation.subject.clone(), relation.object.clone()))
        {
            let mut best_score = f64::NEG_INFINITY;
            for &index in candidates {
                let rj = right_pred_index[right.relations[index].predicate.as_str()];
                let score = match adopted {
                    Some(a) => right_right_sim(a, rj)?,
                    None => left_right_sims[li][rj],
                };
                if score > best_score {
                    best_score = score;
                    if score >= cfg.theta_relation() {
                        absorbed_into = Some(index);
                    }
                }
            }
        }

        match absorbed_into {
            Some(index) => {
                let target = &mut merged_relations[index];
                target.t_start.merge_from(&relation.t_start);
                target.t_end.merge_from(&relation.t_end);
                target.t_obs.merge_from(&relation.t_obs);
            }
            None => appended.push(relation),
        }
    }

    merged_relations.extend(appended);
    let merged = Tkg::from_parts(merged_entities, merged_relations);
    debug_assert!(merged.validate().is_empty());
    Ok(merged)
}

/// Folds a new snapshot into the running graph. The established graph is the
/// right-hand reference, so its canonical names win and nothing it already
/// knows is lost.
pub fn update_dtkg(previous: &Tkg, snapshot: &Tkg, cfg: &MergeConfig) -> Result<Tkg, MergeError> {
    binary_merge(snapshot, previous, cfg)
}

// ---------------------------------------------------------------------------
// Parallel merge
// ---------------------------------------------------------------------------

/// Reduces a list of graphs to one by rounds of pairwise merges. Pairs of one
/// round run concurrently on at most `cfg.workers` threads; rounds are
/// separated by a barrier; an odd leftover carries forward unmodified.
pub fn parallel_merge(graphs: &[Tkg], cfg: &MergeConfig) -> Result<Tkg, MergeError> {
    parallel_merge_with_stats(graphs, cfg).map(|(tkg, _)| tkg)
}

pub fn parallel_merge_with_stats(
    graphs: &[Tkg],
    cfg: &MergeConfig,
) -> Result<(Tkg, MergeStats), MergeError> {
    let mut stats = MergeStats::default();
    if graphs.is_empty() {
        return Ok((Tkg::new(), stats));
    }
    let mut current: Vec<Tkg> = graphs.to_vec();
    while current.len() > 1 {
        stats.rounds += 1;
        let leftover = if current.len() % 2 == 1 {
            current.pop()
        } else {
            None
        };
        let mut pairs: Vec<(Tkg, Tkg)> = Vec::with_capacity(current.len() / 2);
        let mut iter = current.drain(..);
        while let (Some(a), Some(b)) = (iter.next(), iter.next()) {
            pairs.push((a, b));
        }
        drop(iter);
        stats.binary_merges += pairs.len();

        let mut next = Vec::with_capacity(pairs.len() + 1);
        for result in merge_pairs(&pairs, cfg) {
            next.push(result?);
        }
        if let Some(leftover) = leftover {
            next.push(leftover);
        }
        current = next;
    }
    Ok((current.pop().expect("loop leaves one graph"), stats))
}

fn merge_pairs(pairs: &[(Tkg, Tkg)], cfg: &MergeConfig) -> Vec<Result<Tkg, MergeError>> {
    let workers = cfg.workers.max(1).min(pairs.len().max(1));
    if workers <= 1 || pairs.len() <= 1 {
        return pairs
            .iter()
            .map(|(a, b)| binary_merge(a, b, cfg))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= pairs.len() {
                    break;
                }
                let (a, b) = &pairs[index];
                if tx.send((index, binary_merge(a, b, cfg))).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<Result<Tkg, MergeError>>> =
        (0..pairs.len()).map(|_| None).collect();
    for (index, result) in rx {
        slots[index] = Some(result);
    }
    slots
        .into_iter()
        .map(|slot| slot.expect("every pair is merged exactly once"))
        .collect()
}
