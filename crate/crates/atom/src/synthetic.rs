//! Synthetic inputs with controlled similarity geometry.
//!
//! Entity and predicate vocabularies are organized into clusters: members of
//! one cluster embed inside a private 2-plane with a small angular spread, so
//! any two members score well above the merge thresholds, while members of
//! different clusters are exactly orthogonal and score well below them. That
//! margin is what makes merge-order robustness checkable, and the generated
//! graphs mirror the corpus shape (a couple of relations per atomic graph).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{EmbedError, EmbeddingProvider, EmbeddingVector};
use crate::extraction::Document;
use crate::model::{Entity, TemporalRelation, TimeList, Timestamp, Tkg};

/// Largest in-cluster angle, radians. cos(0.5) ≈ 0.878 keeps every
/// in-cluster pair ≥ θ_E + 0.05 under the default hybrid weights, while
/// cross-cluster cosines are 0.
const MAX_CLUSTER_ANGLE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterSpace {
    pub entity_clusters: usize,
    pub relation_clusters: usize,
    pub labels: usize,
}

impl ClusterSpace {
    pub fn new(entity_clusters: usize, relation_clusters: usize, labels: usize) -> Self {
        ClusterSpace {
            entity_clusters: entity_clusters.max(1),
            relation_clusters: relation_clusters.max(1),
            labels: labels.max(1),
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.entity_clusters + self.labels + 2 * self.relation_clusters
    }

    pub fn entity_name(cluster: usize, member: usize) -> String {
        format!("e{cluster}_m{member}")
    }

    pub fn predicate_name(cluster: usize, member: usize) -> String {
        format!("p{cluster}_m{member}")
    }

    pub fn label_name(label: usize) -> String {
        format!("l{label}")
    }

    /// Every entity cluster carries one fixed label.
    pub fn label_of_cluster(&self, cluster: usize) -> usize {
        cluster % self.labels
    }

    fn plane_vector(&self, base_axis: usize, member: usize) -> Vec<f32> {
        // Golden-ratio spacing spreads members inside the cluster plane
        // without ever exceeding the maximum angle.
        let fraction = (member as f64 * 0.618_033_988_749_895).fract();
        let angle = MAX_CLUSTER_ANGLE * fraction;
        let mut values = vec![0.0f32; self.dim()];
        values[base_axis] = angle.cos() as f32;
        values[base_axis + 1] = angle.sin() as f32;
        values
    }

    pub fn entity_embedding(&self, cluster: usize, member: usize) -> EmbeddingVector {
        let axis = 2 * (cluster % self.entity_clusters);
        EmbeddingVector::new(self.plane_vector(axis, member)).expect("unit vector")
    }

    pub fn label_embedding(&self, label: usize) -> EmbeddingVector {
        let mut values = vec![0.0f32; self.dim()];
        values[2 * self.entity_clusters + (label % self.labels)] = 1.0;
        EmbeddingVector::new(values).expect("unit vector")
    }

    pub fn predicate_embedding(&self, cluster: usize, member: usize) -> EmbeddingVector {
        let axis =
            2 * self.entity_clusters + self.labels + 2 * (cluster % self.relation_clusters);
        EmbeddingVector::new(self.plane_vector(axis, member)).expect("unit vector")
    }

    pub fn entity(&self, cluster: usize, member: usize) -> Entity {
        let label = self.label_of_cluster(cluster);
        Entity {
            name: Self::entity_name(cluster, member),
            label: Self::label_name(label),
            name_embedding: Some(self.entity_embedding(cluster, member)),
            label_embedding: Some(self.label_embedding(label)),
        }
    }

    pub fn cluster_of_entity_name(name: &str) -> Option<usize> {
        parse_clustered_name(name, 'e')
    }

    pub fn cluster_of_predicate_name(name: &str) -> Option<usize> {
        parse_clustered_name(name, 'p')
    }
}

fn parse_clustered_name(name: &str, prefix: char) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    let (cluster, _member) = rest.split_once("_m")?;
    cluster.parse().ok()
}

fn parse_label_name(name: &str) -> Option<usize> {
    name.strip_prefix('l')?.parse().ok()
}

/// Embedding provider over the cluster geometry. Texts shaped like
/// `e{c}_m{m}`, `p{c}_m{m}`, and `l{i}` map onto the structured vectors;
/// anything else hashes onto the sphere of the same dimension.
pub struct ClusterEmbeddingProvider {
    space: ClusterSpace,
}

impl ClusterEmbeddingProvider {
    pub fn new(space: ClusterSpace) -> Self {
        ClusterEmbeddingProvider { space }
    }

    fn hash_fallback(&self, text: &str) -> Vec<f32> {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.space.dim();
        let mut values = Vec::with_capacity(dim);
        while values.len() < dim {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let radius = (-2.0 * u1.ln()).sqrt();
            let angle = 2.0 * std::f64::consts::PI * u2;
            values.push((radius * angle.cos()) as f32);
            if values.len() < dim {
                values.push((radius * angle.sin()) as f32);
            }
        }
        values
    }
}

impl EmbeddingProvider for ClusterEmbeddingProvider {
    fn provider_id(&self) -> &str {
        "synthetic"
    }

    fn model_id(&self) -> &str {
        "cluster-planes-v1"
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts
            .iter()
            .map(|text| {
                if let Some(cluster) = ClusterSpace::cluster_of_entity_name(text) {
                    if let Some((_, member)) = split_member(text) {
                        return self
                            .space
                            .entity_embedding(cluster, member)
                            .into_values();
                    }
                }
                if let Some(cluster) = ClusterSpace::cluster_of_predicate_name(text) {
                    if let Some((_, member)) = split_member(text) {
                        return self
                            .space
                            .predicate_embedding(cluster, member)
                            .into_values();
                    }
                }
                if let Some(label) = parse_label_name(text) {
                    return self.space.label_embedding(label).into_values();
                }
                self.hash_fallback(text)
            })
            .collect())
    }
}

fn split_member(name: &str) -> Option<(usize, usize)> {
    let rest = &name[1..];
    let (cluster, member) = rest.split_once("_m")?;
    Some((cluster.parse().ok()?, member.parse().ok()?))
}

// ---------------------------------------------------------------------------
// Graph generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GraphShape {
    pub members_per_cluster: usize,
    /// First day of the random date range (UNIX seconds).
    pub epoch_start: i64,
    /// Number of distinct days dates are drawn from.
    pub day_span: i64,
}

impl Default for GraphShape {
    fn default() -> Self {
        GraphShape {
            members_per_cluster: 8,
            epoch_start: Timestamp::from_ymd(2020, 1, 1).unwrap().as_unix(),
            day_span: 1096,
        }
    }
}

fn random_day(rng: &mut ChaCha8Rng, shape: &GraphShape) -> Timestamp {
    Timestamp::from_unix(shape.epoch_start + rng.gen_range(0..shape.day_span) * 86_400)
}

// Validity stamps are drawn from split windows: starts from the first
// day_span days, ends from the next. Any union of generated relations then
// keeps start ≤ end whenever exactly one of each survives, so merged graphs
// never trip the single-event coherence check.
fn random_start_day(rng: &mut ChaCha8Rng, shape: &GraphShape) -> Timestamp {
    random_day(rng, shape)
}

fn random_end_day(rng: &mut ChaCha8Rng, shape: &GraphShape) -> Timestamp {
    Timestamp::from_unix(
        shape.epoch_start + (shape.day_span + rng.gen_range(0..shape.day_span)) * 86_400,
    )
}

/// Atomic graphs over the cluster vocabulary, averaging about two relations
/// each. Within one graph all entity mentions come from distinct clusters
/// and relation signatures are distinct, which is what the merge preserves.
pub fn synthetic_atomic_graphs(
    space: &ClusterSpace,
    seed: u64,
    n_graphs: usize,
) -> Vec<Tkg> {
    synthetic_atomic_graphs_shaped(space, seed, n_graphs, GraphShape::default())
}

pub fn synthetic_atomic_graphs_shaped(
    space: &ClusterSpace,
    seed: u64,
    n_graphs: usize,
    shape: GraphShape,
) -> Vec<Tkg> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(n_graphs);
    for graph_index in 0..n_graphs {
        // One observation per atomic graph, distinct across graphs, so any
        // merged relation that aggregated several facts carries several
        // observation stamps.
        let observed =
            Timestamp::from_unix(shape.epoch_start + graph_index as i64 * 86_400);
        // 1, 2, or 3 relations, averaging ~2.
        let n_relations = match rng.gen_range(0..10) {
            0..=1 => 1usize,
            2..=8 => 2,
            _ => 3,
        };
        let needed = (2 * n_relations).min(space.entity_clusters);
        let mut clusters: Vec<usize> = Vec::with_capacity(needed);
        while clusters.len() < needed {
            let candidate = rng.gen_range(0..space.entity_clusters);
            if !clusters.contains(&candidate) {
                clusters.push(candidate);
            }
        }
        let entities: Vec<Entity> = clusters
            .iter()
            .map(|&c| space.entity(c, rng.gen_range(0..shape.members_per_cluster)))
            .collect();

        let mut graph = Tkg::new();
        for entity in &entities {
            graph.insert_entity(entity.clone());
        }
        let mut used_signatures: Vec<(usize, usize, usize)> = Vec::new();
        let mut produced = 0usize;
        let mut attempts = 0usize;
        while produced < n_relations && attempts < 32 {
            attempts += 1;
            let subject = &entities[rng.gen_range(0..entities.len())];
            let object = &entities[rng.gen_range(0..entities.len())];
            if subject.key() == object.key() {
                continue;
            }
            let predicate_cluster = rng.gen_range(0..space.relation_clusters);
            let signature = (
                ClusterSpace::cluster_of_entity_name(&subject.name).unwrap(),
                predicate_cluster,
                ClusterSpace::cluster_of_entity_name(&object.name).unwrap(),
            );
            if used_signatures.contains(&signature) {
                continue;
            }
            used_signatures.push(signature);
            let member = rng.gen_range(0..shape.members_per_cluster);
            let mut relation = TemporalRelation::new(
                subject.key(),
                &ClusterSpace::predicate_name(predicate_cluster, member),
                object.key(),
            )
            .expect("generated names are non-empty");
            relation.predicate_embedding =
                Some(space.predicate_embedding(predicate_cluster, member));
            match rng.gen_range(0..10) {
                0..=3 => {}
                4..=6 => {
                    relation.t_start =
                        TimeList::from_timestamps([random_start_day(&mut rng, &shape)]);
                }
                7..=8 => {
                    let start = random_start_day(&mut rng, &shape);
                    let end = random_end_day(&mut rng, &shape);
                    relation.t_start = TimeList::from_timestamps([start]);
                    relation.t_end = TimeList::from_timestamps([end]);
                }
                _ => {
                    relation.t_end = TimeList::from_timestamps([random_end_day(&mut rng, &shape)]);
                }
            }
            relation.t_obs = TimeList::from_timestamps([observed]);
            graph.insert_relation(relation);
            produced += 1;
        }
        graphs.push(graph);
    }
    graphs
}

/// Collapsed view of a graph for order-robustness comparisons: entity counts
/// per cluster and, per relation signature, the unions of its time lists.
/// Canonical member names may differ between merge orders; cluster identity
/// and timestamps may not.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartitionSignature {
    pub entity_cluster_counts: std::collections::BTreeMap<usize, usize>,
    pub relation_signatures:
        std::collections::BTreeMap<(usize, usize, usize), (TimeList, TimeList, TimeList)>,
}

pub fn partition_signature(tkg: &Tkg) -> PartitionSignature {
    let mut signature = PartitionSignature::default();
    for entity in &tkg.entities {
        if let Some(cluster) = ClusterSpace::cluster_of_entity_name(&entity.name) {
            *signature.entity_cluster_counts.entry(cluster).or_insert(0) += 1;
        }
    }
    for relation in &tkg.relations {
        let key = (
            ClusterSpace::cluster_of_entity_name(&relation.subject.name).unwrap_or(usize::MAX),
            ClusterSpace::cluster_of_predicate_name(&relation.predicate).unwrap_or(usize::MAX),
            ClusterSpace::cluster_of_entity_name(&relation.object.name).unwrap_or(usize::MAX),
        );
        let entry = signature
            .relation_signatures
            .entry(key)
            .or_insert_with(|| (TimeList::new(), TimeList::new(), TimeList::new()));
        entry.0.merge_from(&relation.t_start);
        entry.1.merge_from(&relation.t_end);
        entry.2.merge_from(&relation.t_obs);
    }
    signature
}

/// Union of every timestamp appearing in any time list of the graph.
pub fn all_timestamps(tkg: &Tkg) -> TimeList {
    let mut all = TimeList::new();
    for relation in &tkg.relations {
        all.merge_from(&relation.t_start);
        all.merge_from(&relation.t_end);
        all.merge_from(&relation.t_obs);
    }
    all
}

// ---------------------------------------------------------------------------
// Corpus generation (pipe-grammar documents for the mock backend)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct CorpusShape {
    pub n_documents: usize,
    pub facts_per_document: usize,
    pub name_pool: usize,
    pub label_pool: usize,
    pub predicate_pool: usize,
    pub day_span: i64,
}

impl Default for CorpusShape {
    fn default() -> Self {
        CorpusShape {
            n_documents: 10,
            facts_per_document: 4,
            name_pool: 24,
            label_pool: 4,
            predicate_pool: 8,
            day_span: 14,
        }
    }
}

/// Random pipe-grammar corpus for end-to-end mock runs. Entity labels are a
/// fixed function of the name so the (name, label) key is stable across
/// mentions.
pub fn synthetic_corpus(seed: u64, shape: CorpusShape) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epoch = Timestamp::from_ymd(2021, 6, 1).unwrap().as_unix();
    let mut documents = Vec::with_capacity(shape.n_documents);
    for d in 0..shape.n_documents {
        let mut lines = Vec::with_capacity(shape.facts_per_document);
        for _ in 0..shape.facts_per_document {
            let s = rng.gen_range(0..shape.name_pool);
            let mut o = rng.gen_range(0..shape.name_pool);
            if o == s {
                o = (o + 1) % shape.name_pool;
            }
            let p = rng.gen_range(0..shape.predicate_pool);
            let mut line = format!(
                "n{s}:l{sl} | q{p} | n{o}:l{ol}",
                sl = s % shape.label_pool,
                ol = o % shape.label_pool,
            );
            // Starts come from the first day_span days, ends from the next,
            // so merged histories never pair a lone start after a lone end.
            match rng.gen_range(0..10) {
                0..=3 => {}
                4..=6 => {
                    let day = Timestamp::from_unix(
                        epoch + rng.gen_range(0..shape.day_span) * 86_400,
                    );
                    line.push_str(&format!(" | start={}", day.to_iso_date()));
                }
                7..=8 => {
                    let start = epoch + rng.gen_range(0..shape.day_span) * 86_400;
                    let end =
                        epoch + (shape.day_span + rng.gen_range(0..shape.day_span)) * 86_400;
                    line.push_str(&format!(
                        " | start={} | end={}",
                        Timestamp::from_unix(start).to_iso_date(),
                        Timestamp::from_unix(end).to_iso_date()
                    ));
                }
                _ => {
                    let day = Timestamp::from_unix(
                        epoch + (shape.day_span + rng.gen_range(0..shape.day_span)) * 86_400,
                    );
                    line.push_str(&format!(" | end={}", day.to_iso_date()));
                }
            }
            lines.push(line);
        }
        let observed = Timestamp::from_unix(epoch + rng.gen_range(0..shape.day_span) * 86_400);
        documents.push(
            Document::new(format!("doc{d:04}"), lines.join("\n"), observed)
                .expect("generated text is non-empty"),
        );
    }
    documents
}

/// Pipe-grammar corpus over the cluster vocabulary, for pipeline runs whose
/// merges must respect the cluster partition. Subject and object clusters
/// differ within every line.
pub fn synthetic_cluster_corpus(
    space: &ClusterSpace,
    seed: u64,
    n_documents: usize,
    facts_per_document: usize,
) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = GraphShape::default();
    let epoch = Timestamp::from_ymd(2022, 1, 1).unwrap().as_unix();
    let mut documents = Vec::with_capacity(n_documents);
    for d in 0..n_documents {
        let mut lines = Vec::with_capacity(facts_per_document);
        for _ in 0..facts_per_document {
            let sc = rng.gen_range(0..space.entity_clusters);
            let mut oc = rng.gen_range(0..space.entity_clusters);
            if oc == sc {
                oc = (oc + 1) % space.entity_clusters;
            }
            let pc = rng.gen_range(0..space.relation_clusters);
            let sm = rng.gen_range(0..shape.members_per_cluster);
            let om = rng.gen_range(0..shape.members_per_cluster);
            let pm = rng.gen_range(0..shape.members_per_cluster);
            let mut line = format!(
                "{}:{} | {} | {}:{}",
                ClusterSpace::entity_name(sc, sm),
                ClusterSpace::label_name(space.label_of_cluster(sc)),
                ClusterSpace::predicate_name(pc, pm),
                ClusterSpace::entity_name(oc, om),
                ClusterSpace::label_name(space.label_of_cluster(oc)),
            );
            if rng.gen_bool(0.5) {
                let day = Timestamp::from_unix(epoch + rng.gen_range(0..30) * 86_400);
                line.push_str(&format!(" | start={}", day.to_iso_date()));
            }
            lines.push(line);
        }
        let observed = Timestamp::from_unix(epoch + rng.gen_range(0..7) * 86_400);
        documents.push(
            Document::new(format!("cdoc{d:04}"), lines.join("\n"), observed)
                .expect("generated text is non-empty"),
        );
    }
    documents
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{cosine, entity_similarity, SimilarityConfig};

    #[test]
    fn in_cluster_similarity_clears_threshold_with_margin() {
        let space = ClusterSpace::new(5, 4, 3);
        let cfg = SimilarityConfig::default();
        for member_a in 0..8 {
            for member_b in 0..8 {
                let a = space.entity(2, member_a);
                let b = space.entity(2, member_b);
                let sim = entity_similarity(&a, &b, &cfg).unwrap();
                assert!(sim >= cfg.theta_entity + 0.05, "sim {sim}");
            }
        }
    }

    #[test]
    fn cross_cluster_similarity_stays_below_threshold_with_margin() {
        let space = ClusterSpace::new(5, 4, 3);
        let cfg = SimilarityConfig::default();
        for other in [1usize, 3, 4] {
            let a = space.entity(2, 0);
            let b = space.entity(other, 5);
            let sim = entity_similarity(&a, &b, &cfg).unwrap();
            assert!(sim <= cfg.theta_entity - 0.05, "sim {sim}");
        }
    }

    #[test]
    fn predicate_clusters_respect_relation_threshold_margins() {
        let space = ClusterSpace::new(3, 4, 2);
        let cfg = SimilarityConfig::default();
        let a = space.predicate_embedding(1, 0);
        let b = space.predicate_embedding(1, 7);
        let c = space.predicate_embedding(2, 3);
        assert!(cosine(&a, &b).unwrap() >= cfg.theta_relation + 0.05);
        assert!(cosine(&a, &c).unwrap() <= cfg.theta_relation - 0.05);
    }

    #[test]
    fn generated_graphs_are_valid_and_shaped() {
        let space = ClusterSpace::new(12, 6, 4);
        let graphs = synthetic_atomic_graphs(&space, 7, 200);
        assert_eq!(graphs.len(), 200);
        let mut relations = 0usize;
        for graph in &graphs {
            assert!(graph.validate().is_empty());
            relations += graph.relations.len();
            // Entity mentions within one graph come from distinct clusters.
            let clusters: Vec<usize> = graph
                .entities
                .iter()
                .map(|e| ClusterSpace::cluster_of_entity_name(&e.name).unwrap())
                .collect();
            let mut unique = clusters.clone();
            unique.sort_unstable();
            unique.dedup();
            assert_eq!(unique.len(), clusters.len());
        }
        let average = relations as f64 / graphs.len() as f64;
        assert!((1.5..=2.5).contains(&average), "average {average}");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let space = ClusterSpace::new(6, 3, 2);
        assert_eq!(
            synthetic_atomic_graphs(&space, 42, 20),
            synthetic_atomic_graphs(&space, 42, 20)
        );
        assert_ne!(
            synthetic_atomic_graphs(&space, 42, 20),
            synthetic_atomic_graphs(&space, 43, 20)
        );
    }

    #[test]
    fn cluster_provider_matches_space_vectors() {
        let space = ClusterSpace::new(4, 3, 2);
        let provider = ClusterEmbeddingProvider::new(space);
        let out = provider
            .embed_batch(&["e2_m5".into(), "p1_m3".into(), "l1".into(), "other".into()])
            .unwrap();
        assert_eq!(out[0], space.entity_embedding(2, 5).into_values());
        assert_eq!(out[1], space.predicate_embedding(1, 3).into_values());
        assert_eq!(out[2], space.label_embedding(1).into_values());
        assert_eq!(out[3].len(), space.dim());
    }
}
