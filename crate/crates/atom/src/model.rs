//! Dual-time graph data model.
//!
//! A [`Tkg`] is a set of entities plus a set of temporal relations. Every
//! relation carries three time lists: validity start, validity end, and
//! observation. Validity times describe when the stated fact holds in the
//! world; observation times describe when the system learned about it.
//! Unknown validity is an empty list, never a sentinel.
//!
//! The same type represents per-fact atomic graphs, per-observation-time
//! snapshots, and the running consolidated graph.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Datelike, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("name is empty after normalization: {raw:?}")]
    EmptyName { raw: String },
    #[error("unrecognized timestamp format: {value:?}")]
    BadTimestamp { value: String },
    #[error("invalid calendar date {year}-{month:02}-{day:02}")]
    BadDate { year: i32, month: u32, day: u32 },
}

// ---------------------------------------------------------------------------
// Timestamps
// ---------------------------------------------------------------------------

/// UNIX epoch seconds, UTC. Date-only sources map to 00:00:00 UTC of that day.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(i64);

impl Timestamp {
    pub fn from_unix(seconds: i64) -> Self {
        Timestamp(seconds)
    }

    pub fn as_unix(self) -> i64 {
        self.0
    }

    pub fn from_ymd(year: i32, month: u32, day: u32) -> Result<Self, ModelError> {
        let date = NaiveDate::from_ymd_opt(year, month, day)
            .ok_or(ModelError::BadDate { year, month, day })?;
        let dt = date.and_hms_opt(0, 0, 0).expect("midnight is always valid");
        Ok(Timestamp(dt.and_utc().timestamp()))
    }

    /// Parses the timestamp renderings that occur in corpora and model
    /// replies: a bare integer (UNIX seconds), RFC 3339, `YYYY-MM-DD`,
    /// `DD-MM-YYYY`, and `Month D, YYYY`.
    pub fn parse(value: &str) -> Result<Self, ModelError> {
        let text = value.trim();
        let bad = || ModelError::BadTimestamp {
            value: value.to_string(),
        };
        if text.is_empty() {
            return Err(bad());
        }
        if text
            .strip_prefix('-')
            .unwrap_or(text)
            .chars()
            .all(|c| c.is_ascii_digit())
        {
            return text.parse::<i64>().map(Timestamp).map_err(|_| bad());
        }
        if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
            return Ok(Timestamp(dt.timestamp()));
        }
        let bytes = text.as_bytes();
        if bytes.len() == 10 && bytes[4] == b'-' && bytes[7] == b'-' {
            let date = NaiveDate::parse_from_str(text, "%Y-%m-%d").map_err(|_| bad())?;
            return Timestamp::from_ymd(date.year(), date.month(), date.day());
        }
        if bytes.len() == 10 && bytes[2] == b'-' && bytes[5] == b'-' {
            let date = NaiveDate::parse_from_str(text, "%d-%m-%Y").map_err(|_| bad())?;
            return Timestamp::from_ymd(date.year(), date.month(), date.day());
        }
        if let Ok(date) = NaiveDate::parse_from_str(text, "%B %d, %Y") {
            return Timestamp::from_ymd(date.year(), date.month(), date.day());
        }
        Err(bad())
    }

    fn as_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.0, 0).unwrap_or_else(|| DateTime::from_timestamp(0, 0).unwrap())
    }

    /// `YYYY-MM-DD` in UTC.
    pub fn to_iso_date(self) -> String {
        self.as_datetime().format("%Y-%m-%d").to_string()
    }

    /// Human-readable rendering, e.g. `June 18, 2024`. Used when grounding
    /// relative time expressions in prompts.
    pub fn to_human_date(self) -> String {
        self.as_datetime().format("%B %-d, %Y").to_string()
    }

    /// Truncates to 00:00:00 UTC of the same day.
    pub fn truncate_to_day(self) -> Self {
        const DAY: i64 = 86_400;
        Timestamp(self.0.div_euclid(DAY) * DAY)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

// ---------------------------------------------------------------------------
// Time lists
// ---------------------------------------------------------------------------

/// An ascending, duplicate-free list of timestamps. Empty means unknown.
///
/// Merging unions time lists, so the representation is a sorted set; insert
/// order never matters.
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(from = "Vec<i64>", into = "Vec<i64>")]
pub struct TimeList(Vec<Timestamp>);

impl TimeList {
    pub fn new() -> Self {
        TimeList(Vec::new())
    }

    pub fn from_timestamps<I: IntoIterator<Item = Timestamp>>(items: I) -> Self {
        let mut list = TimeList::new();
        for t in items {
            list.insert(t);
        }
        list
    }

    pub fn insert(&mut self, t: Timestamp) {
        if let Err(pos) = self.0.binary_search(&t) {
            self.0.insert(pos, t);
        }
    }

    pub fn union(&self, other: &TimeList) -> TimeList {
        let mut out = self.clone();
        out.merge_from(other);
        out
    }

    pub fn merge_from(&mut self, other: &TimeList) {
        for t in &other.0 {
            self.insert(*t);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.0.binary_search(&t).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = Timestamp> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[Timestamp] {
        &self.0
    }
}

impl From<Vec<i64>> for TimeList {
    fn from(values: Vec<i64>) -> Self {
        TimeList::from_timestamps(values.into_iter().map(Timestamp::from_unix))
    }
}

impl From<TimeList> for Vec<i64> {
    fn from(list: TimeList) -> Self {
        list.0.into_iter().map(Timestamp::as_unix).collect()
    }
}

impl FromIterator<Timestamp> for TimeList {
    fn from_iter<I: IntoIterator<Item = Timestamp>>(iter: I) -> Self {
        TimeList::from_timestamps(iter)
    }
}

// ---------------------------------------------------------------------------
// Names
// ---------------------------------------------------------------------------

/// Canonical form for entity names, labels, and predicates: trimmed,
/// lowercased, internal whitespace runs collapsed to a single underscore.
/// Idempotent. Errors when nothing remains.
pub fn normalize_name(raw: &str) -> Result<String, ModelError> {
    let mut out = String::with_capacity(raw.len());
    let mut pending_gap = false;
    for ch in raw.trim().chars() {
        if ch.is_whitespace() {
            pending_gap = true;
            continue;
        }
        if pending_gap && !out.is_empty() {
            out.push('_');
        }
        pending_gap = false;
        for lower in ch.to_lowercase() {
            out.push(lower);
        }
    }
    if out.is_empty() {
        return Err(ModelError::EmptyName {
            raw: raw.to_string(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Entities and relations
// ---------------------------------------------------------------------------

/// Identity of an entity inside one graph: the normalized (name, label) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityKey {
    pub name: String,
    pub label: String,
}

impl EntityKey {
    pub fn new(name: impl Into<String>, label: impl Into<String>) -> Self {
        EntityKey {
            name: name.into(),
            label: label.into(),
        }
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.label)
    }
}

/// A named, labeled graph node, optionally carrying unit-norm embeddings of
/// its name and label.
#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub name: String,
    pub label: String,
    pub name_embedding: Option<EmbeddingVector>,
    pub label_embedding: Option<EmbeddingVector>,
}

impl Entity {
    /// Builds an entity from raw text, normalizing name and label.
    pub fn new(raw_name: &str, raw_label: &str) -> Result<Self, ModelError> {
        Ok(Entity {
            name: normalize_name(raw_name)?,
            label: normalize_name(raw_label)?,
            name_embedding: None,
            label_embedding: None,
        })
    }

    pub fn with_embeddings(mut self, name: EmbeddingVector, label: EmbeddingVector) -> Self {
        self.name_embedding = Some(name);
        self.label_embedding = Some(label);
        self
    }

    pub fn key(&self) -> EntityKey {
        EntityKey::new(self.name.clone(), self.label.clone())
    }
}

/// A temporal 5-tuple edge plus its observation time list.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalRelation {
    pub subject: EntityKey,
    pub predicate: String,
    pub object: EntityKey,
    pub t_start: TimeList,
    pub t_end: TimeList,
    pub t_obs: TimeList,
    pub predicate_embedding: Option<EmbeddingVector>,
}

impl TemporalRelation {
    pub fn new(
        subject: EntityKey,
        raw_predicate: &str,
        object: EntityKey,
    ) -> Result<Self, ModelError> {
        Ok(TemporalRelation {
            subject,
            predicate: normalize_name(raw_predicate)?,
            object,
            t_start: TimeList::new(),
            t_end: TimeList::new(),
            t_obs: TimeList::new(),
            predicate_embedding: None,
        })
    }

    /// Two relations are the same edge iff all six of these fields agree;
    /// embeddings do not participate in identity.
    pub fn identity(&self) -> RelationIdentity<'_> {
        (
            &self.subject,
            &self.predicate,
            &self.object,
            &self.t_start,
            &self.t_end,
            &self.t_obs,
        )
    }

    pub fn describe(&self) -> String {
        format!(
            "({} -{}-> {})",
            self.subject, self.predicate, self.object
        )
    }
}

pub type RelationIdentity<'a> = (
    &'a EntityKey,
    &'a String,
    &'a EntityKey,
    &'a TimeList,
    &'a TimeList,
    &'a TimeList,
);

// ---------------------------------------------------------------------------
// Graphs
// ---------------------------------------------------------------------------

/// A temporal knowledge graph: a keyed set of entities and a duplicate-free
/// set of temporal relations. Kept in canonical (sorted) order so that equal
/// graphs compare equal field-for-field and serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tkg {
    pub entities: Vec<Entity>,
    pub relations: Vec<TemporalRelation>,
}

impl Tkg {
    pub fn new() -> Self {
        Tkg::default()
    }

    /// Builds a graph from unsorted parts, sorting and deduplicating.
    pub fn from_parts(entities: Vec<Entity>, relations: Vec<TemporalRelation>) -> Self {
        let mut tkg = Tkg {
            entities,
            relations,
        };
        tkg.canonicalize();
        tkg
    }

    pub fn canonicalize(&mut self) {
        self.entities.sort_by(|a, b| a.key().cmp(&b.key()));
        self.entities.dedup_by(|a, b| a.key() == b.key());
        self.relations.sort_by(|a, b| a.identity().cmp(&b.identity()));
        self.relations.dedup_by(|a, b| a.identity() == b.identity());
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }

    /// Inserts an entity unless its key is already present (first wins).
    pub fn insert_entity(&mut self, entity: Entity) {
        let key = entity.key();
        if let Err(pos) = self.entities.binary_search_by(|e| e.key().cmp(&key)) {
            self.entities.insert(pos, entity);
        }
    }

    /// Inserts a relation unless an identical one is already present.
    pub fn insert_relation(&mut self, relation: TemporalRelation) {
        if let Err(pos) = self
            .relations
            .binary_search_by(|r| r.identity().cmp(&relation.identity()))
        {
            self.relations.insert(pos, relation);
        }
    }

    pub fn entity(&self, key: &EntityKey) -> Option<&Entity> {
        self.entities
            .binary_search_by(|e| e.key().cmp(key))
            .ok()
            .map(|pos| &self.entities[pos])
    }

    pub fn contains_entity(&self, key: &EntityKey) -> bool {
        self.entity(key).is_some()
    }

    /// Checks every graph invariant. Returns an empty list iff the graph is
    /// well-formed; violations are data, not errors.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();

        let mut key_counts: BTreeMap<EntityKey, usize> = BTreeMap::new();
        for entity in &self.entities {
            if normalize_name(&entity.name).is_err() {
                violations.push(Violation::EmptyEntityName {
                    key: entity.key(),
                });
            }
            if normalize_name(&entity.label).is_err() {
                violations.push(Violation::EmptyEntityLabel {
                    key: entity.key(),
                });
            }
            *key_counts.entry(entity.key()).or_insert(0) += 1;
        }
        for (key, count) in &key_counts {
            if *count > 1 {
                violations.push(Violation::DuplicateEntityKey { key: key.clone() });
            }
        }

        let mut expected_dim: Option<usize> = None;
        let mut check_dim = |dim: usize, context: String, violations: &mut Vec<Violation>| {
            match expected_dim {
                None => expected_dim = Some(dim),
                Some(expected) if expected != dim => {
                    violations.push(Violation::EmbeddingDimensionMismatch {
                        expected,
                        found: dim,
                        context,
                    });
                }
                _ => {}
            }
        };
        for entity in &self.entities {
            if let Some(v) = &entity.name_embedding {
                check_dim(v.dim(), format!("name embedding of {}", entity.key()), &mut violations);
            }
            if let Some(v) = &entity.label_embedding {
                check_dim(v.dim(), format!("label embedding of {}", entity.key()), &mut violations);
            }
        }

        let mut seen_relations: BTreeMap<OwnedRelationIdentity, usize> = BTreeMap::new();
        for relation in &self.relations {
            if !key_counts.contains_key(&relation.subject) {
                violations.push(Violation::DanglingEndpoint {
                    relation: relation.describe(),
                    key: relation.subject.clone(),
                });
            }
            if !key_counts.contains_key(&relation.object) {
                violations.push(Violation::DanglingEndpoint {
                    relation: relation.describe(),
                    key: relation.object.clone(),
                });
            }
            if normalize_name(&relation.predicate).is_err() {
                violations.push(Violation::EmptyPredicate {
                    relation: relation.describe(),
                });
            }
            if let Some(v) = &relation.predicate_embedding {
                check_dim(
                    v.dim(),
                    format!("predicate embedding of {}", relation.describe()),
                    &mut violations,
                );
            }
            // Single-event relations must not end before they start. A
            // relation counts as single-event while it carries at most one
            // observation: both validity stamps were asserted together and
            // must be coherent. Once several observations merge into it the
            // lists are multi-event history (ended once, started again
            // later), and only per-list ordering applies, which the TimeList
            // representation guarantees.
            if relation.t_start.len() == 1 && relation.t_end.len() == 1 && relation.t_obs.len() <= 1
            {
                let start = relation.t_start.as_slice()[0];
                let end = relation.t_end.as_slice()[0];
                if start > end {
                    violations.push(Violation::StartAfterEnd {
                        relation: relation.describe(),
                        start,
                        end,
                    });
                }
            }
            *seen_relations
                .entry(owned_identity(relation))
                .or_insert(0) += 1;
        }
        for (identity, count) in &seen_relations {
            if *count > 1 {
                violations.push(Violation::DuplicateRelation {
                    relation: format!("({} -{}-> {})", identity.0, identity.1, identity.2),
                });
            }
        }

        violations
    }
}

type OwnedRelationIdentity = (EntityKey, String, EntityKey, TimeList, TimeList, TimeList);

fn owned_identity(r: &TemporalRelation) -> OwnedRelationIdentity {
    (
        r.subject.clone(),
        r.predicate.clone(),
        r.object.clone(),
        r.t_start.clone(),
        r.t_end.clone(),
        r.t_obs.clone(),
    )
}

/// One broken invariant, naming the rule and the offending element.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DanglingEndpoint { relation: String, key: EntityKey },
    DuplicateEntityKey { key: EntityKey },
    DuplicateRelation { relation: String },
    EmptyEntityName { key: EntityKey },
    EmptyEntityLabel { key: EntityKey },
    EmptyPredicate { relation: String },
    EmbeddingDimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    StartAfterEnd {
        relation: String,
        start: Timestamp,
        end: Timestamp,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DanglingEndpoint { relation, key } => {
                write!(f, "relation {relation} references missing entity {key}")
            }
            Violation::DuplicateEntityKey { key } => {
                write!(f, "duplicate entity key {key}")
            }
            Violation::DuplicateRelation { relation } => {
                write!(f, "duplicate relation {relation}")
            }
            Violation::EmptyEntityName { key } => {
                write!(f, "entity {key} has an empty name")
            }
            Violation::EmptyEntityLabel { key } => {
                write!(f, "entity {key} has an empty label")
            }
            Violation::EmptyPredicate { relation } => {
                write!(f, "relation {relation} has an empty predicate")
            }
            Violation::EmbeddingDimensionMismatch {
                expected,
                found,
                context,
            } => write!(
                f,
                "embedding dimension {found} differs from {expected} ({context})"
            ),
            Violation::StartAfterEnd {
                relation,
                start,
                end,
            } => write!(
                f,
                "relation {relation} starts at {start} after it ends at {end}"
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_basic_rules() {
        assert_eq!(normalize_name("John Doe").unwrap(), "john_doe");
        assert_eq!(normalize_name("john_doe").unwrap(), "john_doe");
        assert_eq!(normalize_name("  Real   Madrid ").unwrap(), "real_madrid");
    }

    #[test]
    fn normalize_rejects_empty() {
        assert!(matches!(
            normalize_name("   "),
            Err(ModelError::EmptyName { .. })
        ));
    }

    #[test]
    fn timestamp_parse_forms() {
        let day = Timestamp::from_ymd(2024, 6, 18).unwrap();
        assert_eq!(Timestamp::parse("2024-06-18").unwrap(), day);
        assert_eq!(Timestamp::parse("18-06-2024").unwrap(), day);
        assert_eq!(Timestamp::parse("June 18, 2024").unwrap(), day);
        assert_eq!(
            Timestamp::parse(&day.as_unix().to_string()).unwrap(),
            day
        );
        assert_eq!(
            Timestamp::parse("2024-06-18T00:00:00Z").unwrap(),
            day
        );
        assert!(Timestamp::parse("not a date").is_err());
    }

    #[test]
    fn timestamp_renderings() {
        let day = Timestamp::from_ymd(2024, 6, 18).unwrap();
        assert_eq!(day.to_iso_date(), "2024-06-18");
        assert_eq!(day.to_human_date(), "June 18, 2024");
    }

    #[test]
    fn timestamp_range_covers_2100() {
        let far = Timestamp::from_ymd(2100, 12, 31).unwrap();
        assert!(far.as_unix() > Timestamp::from_ymd(1970, 1, 1).unwrap().as_unix());
        assert_eq!(far.to_iso_date(), "2100-12-31");
    }

    #[test]
    fn time_list_sorted_and_unique() {
        let a = Timestamp::from_unix(10);
        let b = Timestamp::from_unix(5);
        let mut list = TimeList::new();
        list.insert(a);
        list.insert(b);
        list.insert(a);
        assert_eq!(list.as_slice(), &[b, a]);
    }

    #[test]
    fn validate_empty_graph() {
        assert!(Tkg::new().validate().is_empty());
    }

    #[test]
    fn validate_dangling_endpoint() {
        let subject = Entity::new("a", "thing").unwrap();
        let missing = EntityKey::new("ghost", "thing");
        let relation =
            TemporalRelation::new(subject.key(), "touches", missing.clone()).unwrap();
        let tkg = Tkg::from_parts(vec![subject], vec![relation]);
        let violations = tkg.validate();
        assert_eq!(violations.len(), 1);
        assert!(matches!(
            &violations[0],
            Violation::DanglingEndpoint { key, .. } if *key == missing
        ));
    }

    #[test]
    fn validate_duplicate_entity_key() {
        let entity = Entity::new("a", "thing").unwrap();
        // Raw field access bypasses the insert guard on purpose.
        let tkg = Tkg {
            entities: vec![entity.clone(), entity],
            relations: vec![],
        };
        let violations = tkg.validate();
        assert_eq!(violations.len(), 1);
        assert!(matches!(&violations[0], Violation::DuplicateEntityKey { .. }));
    }

    #[test]
    fn validate_start_after_end_single_event() {
        let a = Entity::new("a", "thing").unwrap();
        let b = Entity::new("b", "thing").unwrap();
        let mut rel = TemporalRelation::new(a.key(), "covers", b.key()).unwrap();
        rel.t_start = TimeList::from_timestamps([Timestamp::from_unix(100)]);
        rel.t_end = TimeList::from_timestamps([Timestamp::from_unix(50)]);
        let tkg = Tkg::from_parts(vec![a, b], vec![rel]);
        assert_eq!(tkg.validate().len(), 1);
    }

    #[test]
    fn multi_event_history_is_relaxed() {
        let a = Entity::new("a", "thing").unwrap();
        let b = Entity::new("b", "thing").unwrap();
        let mut rel = TemporalRelation::new(a.key(), "covers", b.key()).unwrap();
        rel.t_start = TimeList::from_timestamps([
            Timestamp::from_unix(100),
            Timestamp::from_unix(400),
        ]);
        rel.t_end = TimeList::from_timestamps([Timestamp::from_unix(50)]);
        let tkg = Tkg::from_parts(vec![a, b], vec![rel]);
        assert!(tkg.validate().is_empty());
    }

    #[test]
    fn merged_observation_history_is_relaxed() {
        // One start and one end stamp out of order, but aggregated from two
        // observations: an ended-then-restarted fact, not a contradiction.
        let a = Entity::new("a", "thing").unwrap();
        let b = Entity::new("b", "thing").unwrap();
        let mut rel = TemporalRelation::new(a.key(), "covers", b.key()).unwrap();
        rel.t_start = TimeList::from_timestamps([Timestamp::from_unix(400)]);
        rel.t_end = TimeList::from_timestamps([Timestamp::from_unix(50)]);
        rel.t_obs = TimeList::from_timestamps([
            Timestamp::from_unix(500),
            Timestamp::from_unix(600),
        ]);
        let tkg = Tkg::from_parts(vec![a, b], vec![rel]);
        assert!(tkg.validate().is_empty());
    }

    #[test]
    fn insert_entity_first_wins() {
        let mut tkg = Tkg::new();
        let first = Entity::new("a", "thing").unwrap();
        let second = Entity::new("a", "thing").unwrap();
        tkg.insert_entity(first);
        tkg.insert_entity(second);
        assert_eq!(tkg.entities.len(), 1);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in "\\PC{0,40}") {
            if let Ok(once) = normalize_name(&raw) {
                prop_assert_eq!(normalize_name(&once).unwrap(), once);
            }
        }

        #[test]
        fn time_list_insert_commutes(a in -4_000_000_000i64..4_000_000_000, b in -4_000_000_000i64..4_000_000_000) {
            let (a, b) = (Timestamp::from_unix(a), Timestamp::from_unix(b));
            let mut left = TimeList::new();
            left.insert(a);
            left.insert(b);
            let mut right = TimeList::new();
            right.insert(b);
            right.insert(a);
            prop_assert_eq!(&left, &right);
            let mut twice = left.clone();
            twice.insert(a);
            prop_assert_eq!(&twice, &left);
        }
    }
}
