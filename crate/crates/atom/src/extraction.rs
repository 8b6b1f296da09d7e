//! Chunking, atomic-fact decomposition, and parallel 5-tuple extraction into
//! atomic graphs.
//!
//! Documents are split into sentences and greedily packed into chunks under a
//! token budget; a model decomposes each chunk into atomic facts; each fact
//! is extracted in parallel into a small [`Tkg`] whose relations all carry
//! the fact's observation time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbedError, Embedder};
use crate::gateway::{CompletionRequest, Gateway, GatewayError, MOCK_REFUSAL};
use crate::model::{
    normalize_name, Entity, ModelError, TemporalRelation, TimeList, Timestamp, Tkg,
};

pub const DEFAULT_MAX_CHUNK_TOKENS: usize = 400;

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("model call failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("decomposition reply unusable for chunk {chunk}: {reply:?}")]
    Decomposition { chunk: String, reply: String },
    #[error("tuple reply unusable for fact {fact_id}: {reason} (raw reply {reply:?})")]
    TupleParse {
        fact_id: String,
        reason: String,
        reply: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("embedding failed: {0}")]
    Embedding(#[from] EmbedError),
    #[error("document {doc_id} has empty text")]
    EmptyDocument { doc_id: String },
    #[error("prompt template {name} unreadable: {reason}")]
    Template { name: String, reason: String },
}

// ---------------------------------------------------------------------------
// Source types
// ---------------------------------------------------------------------------

/// One unstructured input text with the timestamp at which it was observed:
/// publication time for historical sources, ingestion time for live ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub observed_at: Timestamp,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        text: impl Into<String>,
        observed_at: Timestamp,
    ) -> Result<Self, ExtractError> {
        let doc_id = doc_id.into();
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ExtractError::EmptyDocument { doc_id });
        }
        Ok(Document {
            doc_id,
            text,
            observed_at,
        })
    }
}

/// A run of consecutive sentences within a document's token budget.
/// Chunk text joins its sentences with newlines, so concatenating a
/// document's chunks in index order reproduces its sentence sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub token_count: usize,
    pub observed_at: Timestamp,
    /// A single sentence that alone exceeds the budget still becomes a
    /// chunk, flagged here.
    pub oversized: bool,
}

/// One self-contained fact snippet with its observation timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicFact {
    pub fact_id: String,
    pub text: String,
    pub observed_at: Timestamp,
    pub doc_id: String,
    pub chunk_index: usize,
}

impl AtomicFact {
    pub fn source_chunk(&self) -> (&str, usize) {
        (&self.doc_id, self.chunk_index)
    }
}

// ---------------------------------------------------------------------------
// Token estimation and sentence splitting
// ---------------------------------------------------------------------------

/// Deterministic token estimate: ceil(word_count × 4/3) over
/// whitespace-separated words. Exact tokenizers may be plugged into the
/// chunker instead.
pub fn estimate_tokens(text: &str) -> usize {
    tokens_for_words(text.split_whitespace().count())
}

fn tokens_for_words(words: usize) -> usize {
    (words * 4 + 2) / 3
}

const ABBREVIATIONS: [&str; 20] = [
    "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "jr.", "sr.", "inc.", "ltd.", "co.", "corp.",
    "vs.", "etc.", "e.g.", "i.e.", "u.s.", "u.k.", "no.", "approx.",
];

/// Splits on newlines and on sentence-final `.?!`, guarded against common
/// abbreviations and decimal numbers. Approximate boundaries are fine; the
/// token budget dominates chunk quality.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    for line in text.lines() {
        split_line(line.trim(), &mut sentences);
    }
    sentences
}

fn split_line(line: &str, out: &mut Vec<String>) {
    if line.is_empty() {
        return;
    }
    let chars: Vec<char> = line.chars().collect();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let c = chars[i];
        if c == '.' || c == '?' || c == '!' {
            let mut end = i + 1;
            while end < chars.len() && matches!(chars[end], '"' | '\'' | '”' | '’' | ')') {
                end += 1;
            }
            if is_boundary(&chars, i, end) {
                let sentence: String = chars[start..end].iter().collect();
                let sentence = sentence.trim();
                if !sentence.is_empty() {
                    out.push(sentence.to_string());
                }
                start = end;
                i = end;
                continue;
            }
        }
        i += 1;
    }
    let tail: String = chars[start..].iter().collect();
    let tail = tail.trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
}

fn is_boundary(chars: &[char], punct: usize, end: usize) -> bool {
    if chars[punct] == '.' {
        // Decimal number: digit on both sides with no gap.
        if punct > 0
            && punct + 1 < chars.len()
            && chars[punct - 1].is_ascii_digit()
            && chars[punct + 1].is_ascii_digit()
        {
            return false;
        }
        // Trailing token including the period, e.g. "u.s." or "e.g."
        let mut token_start = punct;
        while token_start > 0 && !chars[token_start - 1].is_whitespace() {
            token_start -= 1;
        }
        let token: String = chars[token_start..=punct]
            .iter()
            .collect::<String>()
            .to_lowercase();
        if ABBREVIATIONS.contains(&token.as_str()) {
            return false;
        }
    }
    if end >= chars.len() {
        return true;
    }
    if !chars[end].is_whitespace() {
        return false;
    }
    match chars[end..].iter().find(|c| !c.is_whitespace()) {
        Some(next) => next.is_uppercase() || next.is_ascii_digit() || matches!(next, '"' | '\'' | '“' | '‘'),
        None => true,
    }
}

/// Greedy sentence packing under the token budget. Every chunk inherits the
/// document's observation time.
pub fn chunk_document(doc: &Document, max_tokens: usize) -> Vec<Chunk> {
    chunk_document_with_estimator(doc, max_tokens, |s| s.split_whitespace().count())
}

/// Variant taking a word counter, for callers with an exact tokenizer.
pub fn chunk_document_with_estimator<F>(
    doc: &Document,
    max_tokens: usize,
    count_words: F,
) -> Vec<Chunk>
where
    F: Fn(&str) -> usize,
{
    let max_tokens = max_tokens.max(16);
    let sentences = split_sentences(&doc.text);
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut current_words = 0usize;

    let flush = |chunks: &mut Vec<Chunk>, sentences: &mut Vec<String>, words: usize, oversized: bool| {
        if sentences.is_empty() {
            return;
        }
        let index = chunks.len();
        chunks.push(Chunk {
            doc_id: doc.doc_id.clone(),
            index,
            text: sentences.join("\n"),
            token_count: tokens_for_words(words),
            observed_at: doc.observed_at,
            oversized,
        });
        sentences.clear();
    };

    for sentence in sentences {
        let words = count_words(&sentence);
        if tokens_for_words(words) > max_tokens {
            flush(&mut chunks, &mut current, current_words, false);
            current_words = 0;
            let mut single = vec![sentence];
            flush(&mut chunks, &mut single, words, true);
            continue;
        }
        if current.is_empty() || tokens_for_words(current_words + words) <= max_tokens {
            current.push(sentence);
            current_words += words;
        } else {
            flush(&mut chunks, &mut current, current_words, false);
            current_words = words;
            current.push(sentence);
        }
    }
    flush(&mut chunks, &mut current, current_words, false);
    chunks
}

// ---------------------------------------------------------------------------
// Structured prompts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptTask {
    Decompose,
    Extract,
}

/// The machine-readable block appended to every user prompt. The mock
/// backend parses exactly this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredPrompt {
    pub task: PromptTask,
    pub observed_at: Option<Timestamp>,
    pub payload: String,
}

pub fn render_structured_prompt(task: PromptTask, observed_at: Timestamp, payload: &str) -> String {
    let task_name = match task {
        PromptTask::Decompose => "decompose",
        PromptTask::Extract => "extract",
    };
    format!(
        "TASK: {task_name}\nOBSERVATION_DATE: {iso}\nOBSERVATION_DATE_HUMAN: {human}\nINPUT:\n<<<\n{payload}\n>>>",
        iso = observed_at.to_iso_date(),
        human = observed_at.to_human_date(),
    )
}

pub fn parse_structured_prompt(user_prompt: &str) -> Option<StructuredPrompt> {
    let mut task = None;
    let mut observed_at = None;
    let mut payload_lines: Vec<&str> = Vec::new();
    let mut in_payload = false;
    let mut payload_closed = false;
    for line in user_prompt.lines() {
        if in_payload {
            if line.trim() == ">>>" {
                in_payload = false;
                payload_closed = true;
            } else {
                payload_lines.push(line);
            }
            continue;
        }
        if payload_closed {
            continue;
        }
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix("TASK:") {
            task = match name.trim() {
                "decompose" => Some(PromptTask::Decompose),
                "extract" => Some(PromptTask::Extract),
                _ => None,
            };
        } else if let Some(date) = trimmed.strip_prefix("OBSERVATION_DATE:") {
            observed_at = Timestamp::parse(date.trim()).ok();
        } else if trimmed == "<<<" {
            in_payload = true;
        }
    }
    let task = task?;
    if !payload_closed {
        return None;
    }
    Some(StructuredPrompt {
        task,
        observed_at,
        payload: payload_lines.join("\n"),
    })
}

// ---------------------------------------------------------------------------
// Model reply schema
// ---------------------------------------------------------------------------

fn default_label() -> String {
    "entity".to_string()
}

/// One 5-tuple as the model reports it, before normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTuple {
    pub subject: String,
    #[serde(default = "default_label")]
    pub subject_label: String,
    pub predicate: String,
    pub object: String,
    #[serde(default = "default_label")]
    pub object_label: String,
    #[serde(default)]
    pub t_start: Vec<String>,
    #[serde(default)]
    pub t_end: Vec<String>,
}

#[derive(Debug, Clone)]
struct ParsedTuple {
    subject_name: String,
    subject_label: String,
    predicate: String,
    object_name: String,
    object_label: String,
    t_start: TimeList,
    t_end: TimeList,
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

/// System prompts, shipped as editable text files and overridable per run.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub decompose: String,
    pub extract: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            decompose: include_str!("../prompts/decompose.prompt").to_string(),
            extract: include_str!("../prompts/extract.prompt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Loads `decompose.prompt` and `extract.prompt` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self, ExtractError> {
        let read = |name: &str| -> Result<String, ExtractError> {
            std::fs::read_to_string(dir.join(name)).map_err(|e| ExtractError::Template {
                name: name.to_string(),
                reason: e.to_string(),
            })
        };
        Ok(PromptTemplates {
            decompose: read("decompose.prompt")?,
            extract: read("extract.prompt")?,
        })
    }
}

// ---------------------------------------------------------------------------
// Extractor
// ---------------------------------------------------------------------------

const REFORMAT_HINT: &str =
    "REFORMAT: reply strictly in the required output format, with no commentary.";

/// Decomposition and 5-tuple extraction against a gateway and embedder.
pub struct Extractor {
    templates: PromptTemplates,
}

impl Default for Extractor {
    fn default() -> Self {
        Extractor::new()
    }
}

impl Extractor {
    pub fn new() -> Self {
        Extractor {
            templates: PromptTemplates::default(),
        }
    }

    pub fn with_templates(templates: PromptTemplates) -> Self {
        Extractor { templates }
    }

    fn decompose_request(&self, chunk: &Chunk) -> CompletionRequest {
        CompletionRequest::new(
            self.templates.decompose.clone(),
            render_structured_prompt(PromptTask::Decompose, chunk.observed_at, &chunk.text),
        )
    }

    fn extract_request(&self, fact: &AtomicFact) -> CompletionRequest {
        CompletionRequest::new(
            self.templates.extract.clone(),
            render_structured_prompt(PromptTask::Extract, fact.observed_at, &fact.text),
        )
    }

    /// Decomposes one chunk into atomic facts. A reply that fails the strict
    /// line-oriented format earns one reformat retry, then an error carrying
    /// the raw reply.
    pub fn decompose(&self, chunk: &Chunk, gateway: &Gateway) -> Result<Vec<AtomicFact>, ExtractError> {
        let mut results = self.decompose_all(std::slice::from_ref(chunk), gateway);
        results.remove(0)
    }

    /// Batch decomposition; one result slot per chunk, positionally aligned.
    pub fn decompose_all(
        &self,
        chunks: &[Chunk],
        gateway: &Gateway,
    ) -> Vec<Result<Vec<AtomicFact>, ExtractError>> {
        let requests: Vec<CompletionRequest> =
            chunks.iter().map(|c| self.decompose_request(c)).collect();
        let replies = gateway.complete_batch(&requests);
        chunks
            .iter()
            .zip(requests.iter())
            .zip(replies)
            .map(|((chunk, request), reply)| {
                let reply = reply?;
                let lines = match parse_decompose_reply(&reply) {
                    Ok(lines) => lines,
                    Err(_) => {
                        let retry = retry_request(request);
                        let second = gateway.complete(&retry)?;
                        parse_decompose_reply(&second).map_err(|_| {
                            ExtractError::Decomposition {
                                chunk: format!("{}#c{}", chunk.doc_id, chunk.index),
                                reply: second,
                            }
                        })?
                    }
                };
                Ok(lines
                    .into_iter()
                    .enumerate()
                    .map(|(i, text)| AtomicFact {
                        fact_id: format!("{}#c{}#f{}", chunk.doc_id, chunk.index, i),
                        text,
                        observed_at: chunk.observed_at,
                        doc_id: chunk.doc_id.clone(),
                        chunk_index: chunk.index,
                    })
                    .collect())
            })
            .collect()
    }

    /// Extracts one atomic graph from one fact.
    pub fn extract_quintuples(
        &self,
        fact: &AtomicFact,
        gateway: &Gateway,
        embedder: &Embedder,
    ) -> Result<Tkg, ExtractError> {
        let mut results = self.extract_all(std::slice::from_ref(fact), gateway, embedder);
        results.remove(0)
    }

    /// Parallel extraction over a batch of facts. Output is positionally
    /// aligned; a failed slot never aborts its siblings.
    pub fn extract_all(
        &self,
        facts: &[AtomicFact],
        gateway: &Gateway,
        embedder: &Embedder,
    ) -> Vec<Result<Tkg, ExtractError>> {
        let requests: Vec<CompletionRequest> =
            facts.iter().map(|f| self.extract_request(f)).collect();
        let replies = gateway.complete_batch(&requests);

        let parsed_slots: Vec<Result<Vec<ParsedTuple>, ExtractError>> = facts
            .iter()
            .zip(requests.iter())
            .zip(replies)
            .map(|((fact, request), reply)| {
                let reply = reply?;
                match parse_extract_reply(&reply) {
                    Ok(tuples) => Ok(tuples),
                    Err(_) => {
                        let retry = retry_request(request);
                        let second = gateway.complete(&retry)?;
                        parse_extract_reply(&second).map_err(|reason| {
                            ExtractError::TupleParse {
                                fact_id: fact.fact_id.clone(),
                                reason,
                                reply: second,
                            }
                        })
                    }
                }
            })
            .collect();

        // Warm the embedding cache with every string in the batch at once.
        let mut warm: Vec<String> = Vec::new();
        for slot in parsed_slots.iter().flatten() {
            for t in slot {
                warm.push(t.subject_name.clone());
                warm.push(t.subject_label.clone());
                warm.push(t.object_name.clone());
                warm.push(t.object_label.clone());
                warm.push(t.predicate.clone());
            }
        }
        warm.sort();
        warm.dedup();
        if let Err(e) = embedder.embed(&warm) {
            return facts
                .iter()
                .map(|_| Err(ExtractError::Embedding(e.clone())))
                .collect();
        }

        facts
            .iter()
            .zip(parsed_slots)
            .map(|(fact, slot)| slot.and_then(|tuples| build_graph(fact, &tuples, embedder)))
            .collect()
    }
}

fn retry_request(request: &CompletionRequest) -> CompletionRequest {
    let mut retry = request.clone();
    retry.user_prompt = format!("{}\n{}", request.user_prompt, REFORMAT_HINT);
    retry
}

fn parse_decompose_reply(reply: &str) -> Result<Vec<String>, ()> {
    if reply.contains(MOCK_REFUSAL) {
        return Err(());
    }
    let lines: Vec<String> = reply
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(());
    }
    Ok(lines)
}

fn parse_extract_reply(reply: &str) -> Result<Vec<ParsedTuple>, String> {
    let mut text = reply.trim();
    // Tolerate fenced replies from live models.
    if let Some(stripped) = text.strip_prefix("```") {
        let stripped = stripped.strip_prefix("json").unwrap_or(stripped);
        text = stripped.strip_suffix("```").unwrap_or(stripped).trim();
    }
    let raw: Vec<RawTuple> =
        serde_json::from_str(text).map_err(|e| format!("not a tuple array: {e}"))?;
    raw.into_iter()
        .map(|t| {
            let parse_times = |values: &[String]| -> Result<TimeList, String> {
                values
                    .iter()
                    .map(|v| Timestamp::parse(v).map_err(|e| e.to_string()))
                    .collect::<Result<TimeList, String>>()
            };
            Ok(ParsedTuple {
                subject_name: normalize_name(&t.subject).map_err(|e| e.to_string())?,
                subject_label: normalize_label(&t.subject_label)?,
                predicate: normalize_name(&t.predicate).map_err(|e| e.to_string())?,
                object_name: normalize_name(&t.object).map_err(|e| e.to_string())?,
                object_label: normalize_label(&t.object_label)?,
                t_start: parse_times(&t.t_start)?,
                t_end: parse_times(&t.t_end)?,
            })
        })
        .collect()
}

fn normalize_label(raw: &str) -> Result<String, String> {
    if raw.trim().is_empty() {
        return Ok(default_label());
    }
    normalize_name(raw).map_err(|e| e.to_string())
}

fn build_graph(
    fact: &AtomicFact,
    tuples: &[ParsedTuple],
    embedder: &Embedder,
) -> Result<Tkg, ExtractError> {
    let mut texts: Vec<String> = Vec::new();
    for t in tuples {
        texts.push(t.subject_name.clone());
        texts.push(t.subject_label.clone());
        texts.push(t.object_name.clone());
        texts.push(t.object_label.clone());
        texts.push(t.predicate.clone());
    }
    texts.sort();
    texts.dedup();
    let vectors = embedder.embed(&texts)?;
    let lookup = |text: &str| {
        let pos = texts.binary_search_by(|t| t.as_str().cmp(text)).unwrap();
        vectors[pos].clone()
    };

    let mut tkg = Tkg::new();
    for t in tuples {
        let subject = Entity::new(&t.subject_name, &t.subject_label)?
            .with_embeddings(lookup(&t.subject_name), lookup(&t.subject_label));
        let object = Entity::new(&t.object_name, &t.object_label)?
            .with_embeddings(lookup(&t.object_name), lookup(&t.object_label));
        let mut relation = TemporalRelation::new(subject.key(), &t.predicate, object.key())?;
        relation.t_start = t.t_start.clone();
        relation.t_end = t.t_end.clone();
        relation.t_obs = TimeList::from_timestamps([fact.observed_at]);
        relation.predicate_embedding = Some(lookup(&t.predicate));
        tkg.insert_entity(subject);
        tkg.insert_entity(object);
        tkg.insert_relation(relation);
    }
    Ok(tkg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::MockEmbeddingProvider;
    use crate::gateway::MockBackend;
    use std::sync::Arc;

    fn mock_gateway() -> Gateway {
        Gateway::new(Arc::new(MockBackend::new()), 8)
    }

    fn mock_embedder() -> Embedder {
        Embedder::in_memory(Arc::new(MockEmbeddingProvider::new()))
    }

    fn doc(text: &str, observed: Timestamp) -> Document {
        Document::new("d1", text, observed).unwrap()
    }

    fn day(y: i32, m: u32, d: u32) -> Timestamp {
        Timestamp::from_ymd(y, m, d).unwrap()
    }

    #[test]
    fn token_estimates() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("hello world"), 3);
        let paragraph = vec!["word"; 300].join(" ");
        assert_eq!(estimate_tokens(&paragraph), 400);
    }

    #[test]
    fn sentences_guard_abbreviations_and_decimals() {
        let text = "Dr. Smith met U.S. officials. Prices rose 2.5 percent. Done!";
        let got = split_sentences(text);
        assert_eq!(
            got,
            vec![
                "Dr. Smith met U.S. officials.",
                "Prices rose 2.5 percent.",
                "Done!"
            ]
        );
    }

    fn capitalized_sentence(words: usize) -> String {
        let mut s = String::from("Word");
        for _ in 1..words {
            s.push_str(" word");
        }
        s.push('.');
        s
    }

    #[test]
    fn chunking_single_chunk_under_budget() {
        // 260 words ≈ 347 estimated tokens, under the 400 budget.
        let sentence = capitalized_sentence(26);
        let text = vec![sentence.as_str(); 10].join(" ");
        let chunks = chunk_document(&doc(&text, day(2020, 1, 1)), 400);
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].token_count <= 400);
    }

    #[test]
    fn chunking_empty_document_text() {
        let d = Document {
            doc_id: "d1".into(),
            text: "   \n ".into(),
            observed_at: day(2020, 1, 1),
        };
        assert!(chunk_document(&d, 400).is_empty());
    }

    #[test]
    fn chunking_splits_900_tokens_into_three_ordered_chunks() {
        // 15 sentences of 45 words: 675 words ≈ 900 estimated tokens.
        let sentence = capitalized_sentence(45);
        let text = vec![sentence.as_str(); 15].join(" ");
        let d = doc(&text, day(2020, 1, 1));
        let chunks = chunk_document(&d, 400);
        assert_eq!(chunks.len(), 3);
        for (i, chunk) in chunks.iter().enumerate() {
            assert_eq!(chunk.index, i);
            assert!(chunk.token_count <= 400);
            assert_eq!(estimate_tokens(&chunk.text), chunk.token_count);
            assert!(!chunk.oversized);
            assert_eq!(chunk.observed_at, d.observed_at);
        }
        let rejoined: Vec<String> = chunks
            .iter()
            .flat_map(|c| split_sentences(&c.text))
            .collect();
        assert_eq!(rejoined, split_sentences(&d.text));
    }

    #[test]
    fn chunking_flags_oversized_sentence() {
        let sentence = capitalized_sentence(500);
        let chunks = chunk_document(&doc(&sentence, day(2020, 1, 1)), 400);
        assert_eq!(chunks.len(), 1);
        assert!(chunks[0].oversized);
        assert!(chunks[0].token_count > 400);
    }

    #[test]
    fn structured_prompt_round_trip() {
        let rendered = render_structured_prompt(
            PromptTask::Extract,
            day(2024, 6, 18),
            "line one\nline two",
        );
        let parsed = parse_structured_prompt(&rendered).unwrap();
        assert_eq!(parsed.task, PromptTask::Extract);
        assert_eq!(parsed.observed_at, Some(day(2024, 6, 18)));
        assert_eq!(parsed.payload, "line one\nline two");
    }

    fn chunk_of(text: &str, observed: Timestamp) -> Chunk {
        Chunk {
            doc_id: "d1".into(),
            index: 0,
            text: text.into(),
            token_count: estimate_tokens(text),
            observed_at: observed,
            oversized: false,
        }
    }

    #[test]
    fn decompose_echoes_single_clause_sentence() {
        let gateway = mock_gateway();
        let chunk = chunk_of("Acme opened a lab in Austin.", day(2021, 2, 3));
        let facts = Extractor::new().decompose(&chunk, &gateway).unwrap();
        assert_eq!(facts.len(), 1);
        assert_eq!(facts[0].text, "Acme opened a lab in Austin.");
        assert_eq!(facts[0].observed_at, chunk.observed_at);
        assert_eq!(facts[0].source_chunk(), ("d1", 0));
    }

    #[test]
    fn decompose_appendix_paragraph_into_three_dated_facts() {
        let gateway = mock_gateway();
        let text = "On June 18, 2024, Real Madrid won the Champions League final with a 2-1 victory. Following the triumph, fans of Real Madrid celebrated the Champions League victory across the city.";
        let chunk = chunk_of(text, day(2025, 1, 1));
        let facts = Extractor::new().decompose(&chunk, &gateway).unwrap();
        assert_eq!(facts.len(), 3);
        for fact in &facts {
            assert!(fact.text.contains("June 18, 2024"), "{}", fact.text);
        }
    }

    #[test]
    fn decompose_resolves_relative_month() {
        let gateway = mock_gateway();
        let chunk = chunk_of("Cases surged a month ago.", day(2020, 3, 1));
        let facts = Extractor::new().decompose(&chunk, &gateway).unwrap();
        assert_eq!(facts.len(), 1);
        assert!(facts[0].text.contains("February 2020"), "{}", facts[0].text);
    }

    fn fact_of(text: &str, observed: Timestamp) -> AtomicFact {
        AtomicFact {
            fact_id: "d1#c0#f0".into(),
            text: text.into(),
            observed_at: observed,
            doc_id: "d1".into(),
            chunk_index: 0,
        }
    }

    #[test]
    fn extract_end_action_populates_only_t_end() {
        let gateway = mock_gateway();
        let embedder = mock_embedder();
        let fact = fact_of(
            "John Doe is no longer the CEO of X on 01-01-2026",
            day(2026, 1, 2),
        );
        let tkg = Extractor::new()
            .extract_quintuples(&fact, &gateway, &embedder)
            .unwrap();
        assert_eq!(tkg.relations.len(), 1);
        let r = &tkg.relations[0];
        assert_eq!(r.subject.name, "john_doe");
        assert_eq!(r.predicate, "is_ceo");
        assert_eq!(r.object.name, "x");
        assert!(r.t_start.is_empty());
        assert_eq!(r.t_end.as_slice(), &[day(2026, 1, 1)]);
        assert_eq!(r.t_obs.as_slice(), &[fact.observed_at]);
        assert!(tkg.validate().is_empty());
    }

    #[test]
    fn extract_without_temporal_mention_keeps_lists_empty() {
        let gateway = mock_gateway();
        let embedder = mock_embedder();
        let fact = fact_of("river Thames:river | flows through | London:city", day(2020, 5, 5));
        let tkg = Extractor::new()
            .extract_quintuples(&fact, &gateway, &embedder)
            .unwrap();
        assert_eq!(tkg.relations.len(), 1);
        assert!(tkg.relations[0].t_start.is_empty());
        assert!(tkg.relations[0].t_end.is_empty());
        assert_eq!(tkg.relations[0].t_obs.len(), 1);
    }

    #[test]
    fn extract_real_madrid_fact_matches_annotation() {
        let gateway = mock_gateway();
        let embedder = mock_embedder();
        let fact = fact_of(
            "Real Madrid won the Champions League final match on June 18, 2024.",
            day(2025, 1, 1),
        );
        let tkg = Extractor::new()
            .extract_quintuples(&fact, &gateway, &embedder)
            .unwrap();
        assert_eq!(tkg.relations.len(), 1);
        let r = &tkg.relations[0];
        assert_eq!(r.subject.name, "real_madrid");
        assert_eq!(r.t_start.as_slice(), &[day(2024, 6, 18)]);
        assert!(r.t_end.is_empty());
    }

    #[test]
    fn extract_all_empty_input() {
        let gateway = mock_gateway();
        let embedder = mock_embedder();
        assert!(Extractor::new()
            .extract_all(&[], &gateway, &embedder)
            .is_empty());
    }

    #[test]
    fn extract_all_reports_poisoned_slot_without_aborting() {
        let gateway = mock_gateway();
        let embedder = mock_embedder();
        let facts = vec![
            fact_of("a:thing | touches | b:thing", day(2020, 1, 1)),
            fact_of("complete gibberish outside the grammar", day(2020, 1, 1)),
            fact_of("c:thing | touches | d:thing", day(2020, 1, 1)),
        ];
        let results = Extractor::new().extract_all(&facts, &gateway, &embedder);
        assert!(results[0].is_ok());
        assert!(matches!(
            results[1].as_ref().unwrap_err(),
            ExtractError::TupleParse { .. }
        ));
        assert!(results[2].is_ok());
    }

    #[test]
    fn extraction_is_deterministic_and_obs_invariant_holds() {
        let gateway = mock_gateway();
        let embedder = mock_embedder();
        let facts = vec![
            fact_of("a:thing | owns | b:thing | start=2020-01-01", day(2020, 2, 2)),
            fact_of(
                "c:person | no longer leads | d:organization | start=2021-03-04",
                day(2021, 3, 5),
            ),
        ];
        let extractor = Extractor::new();
        let first = extractor.extract_all(&facts, &gateway, &embedder);
        let second = extractor.extract_all(&facts, &gateway, &embedder);
        for ((fact, a), b) in facts.iter().zip(&first).zip(&second) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert_eq!(a, b);
            for relation in &a.relations {
                assert_eq!(relation.t_obs.len(), 1);
                assert_eq!(relation.t_obs.as_slice(), &[fact.observed_at]);
                for marker in ["no_longer", "stopped_", "ended_"] {
                    assert!(
                        !relation.predicate.contains(marker),
                        "predicate {} carries negation marker",
                        relation.predicate
                    );
                }
            }
        }
        // The end action surfaced through t_end.
        let ended = &first[1].as_ref().unwrap().relations[0];
        assert_eq!(ended.predicate, "leads");
        assert!(ended.t_start.is_empty());
        assert_eq!(ended.t_end.len(), 1);
    }
}
