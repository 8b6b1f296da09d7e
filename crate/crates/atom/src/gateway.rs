//! Completion-model access behind one interface: a live HTTP backend with
//! retry/backoff and a deterministic mock backend, so the whole pipeline can
//! run hermetically.
//!
//! The mock recognizes the structured prompts built by the extraction module
//! and a constrained test-corpus grammar (pipe-delimited fact lines plus a
//! small set of rewrite patterns); anything else gets a fixed refusal string.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::extraction::{self, RawTuple};
use crate::model::Timestamp;

/// Fixed reply the mock returns for input outside its grammar.
pub const MOCK_REFUSAL: &str = "UNRECOGNIZED INPUT";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("api key environment variable {var} is not set")]
    MissingApiKey { var: String },
    #[error("authentication rejected (HTTP {status}): {detail}")]
    Auth { status: u16, detail: String },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("HTTP {status}: {detail}")]
    Http { status: u16, detail: String },
    #[error("malformed endpoint {0:?}")]
    MalformedEndpoint(String),
    #[error("malformed completion reply: {0}")]
    MalformedReply(String),
    #[error("temperature {0} is outside [0, 2]")]
    InvalidTemperature(f64),
}

// ---------------------------------------------------------------------------
// Requests and configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl CompletionRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        CompletionRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_output_tokens: 4096,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self, GatewayError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(GatewayError::InvalidTemperature(temperature));
        }
        self.temperature = temperature;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model_id: String,
    pub api_key_env_var: String,
    pub max_concurrent_requests: usize,
    pub retry: RetryPolicy,
}

impl BackendConfig {
    pub fn mock() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: String::new(),
            model_id: "mock".into(),
            api_key_env_var: "ATOM_API_KEY".into(),
            max_concurrent_requests: 40,
            retry: RetryPolicy::default(),
        }
    }

    /// Live backend configured from `ATOM_API_ENDPOINT` / `ATOM_MODEL_ID`;
    /// the key itself is read when the gateway is built.
    pub fn live_from_env() -> Self {
        BackendConfig {
            kind: BackendKind::Live,
            endpoint: std::env::var("ATOM_API_ENDPOINT").unwrap_or_default(),
            model_id: std::env::var("ATOM_MODEL_ID").unwrap_or_default(),
            api_key_env_var: "ATOM_API_KEY".into(),
            max_concurrent_requests: 40,
            retry: RetryPolicy::default(),
        }
    }
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::mock()
    }
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut permits = self.0.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.0.available.notify_one();
    }
}

/// Shareable completion front-end. A single semaphore bounds in-flight
/// requests across every caller of this gateway instance.
pub struct Gateway {
    backend: Arc<dyn CompletionBackend>,
    limiter: Semaphore,
    max_concurrent: usize,
    kind: BackendKind,
}

impl Gateway {
    pub fn new(backend: Arc<dyn CompletionBackend>, max_concurrent: usize) -> Self {
        Gateway::with_kind(backend, max_concurrent, BackendKind::Mock)
    }

    pub fn with_kind(
        backend: Arc<dyn CompletionBackend>,
        max_concurrent: usize,
        kind: BackendKind,
    ) -> Self {
        let max_concurrent = max_concurrent.max(1);
        Gateway {
            backend,
            limiter: Semaphore::new(max_concurrent),
            max_concurrent,
            kind,
        }
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        match config.kind {
            BackendKind::Mock => Ok(Gateway::with_kind(
                Arc::new(MockBackend::new()),
                config.max_concurrent_requests,
                BackendKind::Mock,
            )),
            BackendKind::Live => {
                let backend = LiveBackend::from_env(config)?;
                Ok(Gateway::with_kind(
                    Arc::new(backend),
                    config.max_concurrent_requests,
                    BackendKind::Live,
                ))
            }
        }
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let _permit = self.limiter.acquire();
        self.backend.complete(request)
    }

    /// Fans a batch out over worker threads. Results are positionally
    /// aligned with the inputs, at most `max_concurrent` requests are in
    /// flight at once, and one slot's failure never aborts its siblings.
    pub fn complete_batch(
        &self,
        requests: &[CompletionRequest],
    ) -> Vec<Result<String, GatewayError>> {
        if requests.is_empty() {
            return Vec::new();
        }
        let workers = requests.len().min(self.max_concurrent);
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let index = next.fetch_add(1, Ordering::SeqCst);
                    if index >= requests.len() {
                        break;
                    }
                    let result = self.complete(&requests[index]);
                    if tx.send((index, result)).is_err() {
                        break;
                    }
                });
            }
        });
        drop(tx);
        let mut slots: Vec<Option<Result<String, GatewayError>>> =
            (0..requests.len()).map(|_| None).collect();
        for (index, result) in rx {
            slots[index] = Some(result);
        }
        slots
            .into_iter()
            .map(|slot| slot.expect("every slot is answered exactly once"))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Live backend
// ---------------------------------------------------------------------------

pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One HTTP round trip. Kept behind a trait so retry behavior is testable
/// with fault-injection doubles.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: &str,
        body: &serde_json::Value,
    ) -> Result<HttpReply, String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        ReqwestTransport {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("default client configuration is valid"),
        }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        ReqwestTransport::new()
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: &str,
        body: &serde_json::Value,
    ) -> Result<HttpReply, String> {
        let response = self
            .client
            .post(url)
            .bearer_auth(api_key)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Chat-completion backend over HTTP+JSON: messages array in, choices array
/// out. Retries timeouts, 429, and 5xx with exponential backoff and jitter.
pub struct LiveBackend {
    endpoint: String,
    model_id: String,
    api_key: String,
    retry: RetryPolicy,
    transport: Box<dyn HttpTransport>,
}

impl LiveBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model_id: impl Into<String>,
        api_key: impl Into<String>,
        retry: RetryPolicy,
        transport: Box<dyn HttpTransport>,
    ) -> Result<Self, GatewayError> {
        let endpoint = endpoint.into();
        if reqwest::Url::parse(&endpoint).is_err() {
            return Err(GatewayError::MalformedEndpoint(endpoint));
        }
        Ok(LiveBackend {
            endpoint,
            model_id: model_id.into(),
            api_key: api_key.into(),
            retry,
            transport: transport,
        })
    }

    pub fn from_env(config: &BackendConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env_var)
            .ok()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| GatewayError::MissingApiKey {
                var: config.api_key_env_var.clone(),
            })?;
        LiveBackend::new(
            config.endpoint.clone(),
            config.model_id.clone(),
            api_key,
            config.retry.clone(),
            Box::new(ReqwestTransport::new()),
        )
    }

    fn parse_reply(body: &str) -> Result<String, GatewayError> {
        let value: serde_json::Value = serde_json::from_str(body)
            .map_err(|e| GatewayError::MalformedReply(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| {
                GatewayError::MalformedReply("no choices[0].message.content".into())
            })
    }
}

impl CompletionBackend for LiveBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user",   "content": request.user_prompt},
            ],
        });
        let max_attempts = self.retry.max_attempts.max(1);
        let mut last_failure = String::new();
        for attempt in 1..=max_attempts {
            match self.transport.post_json(&self.endpoint, &self.api_key, &body) {
                Ok(reply) if reply.status == 200 => return Self::parse_reply(&reply.body),
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(GatewayError::Auth {
                        status: reply.status,
                        detail: snippet(&reply.body),
                    });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    last_failure = format!("HTTP {}: {}", reply.status, snippet(&reply.body));
                }
                Ok(reply) => {
                    return Err(GatewayError::Http {
                        status: reply.status,
                        detail: snippet(&reply.body),
                    });
                }
                Err(transport) => last_failure = transport,
            }
            if attempt < max_attempts {
                let backoff = self.retry.base_backoff_ms.saturating_mul(1 << (attempt - 1));
                let jitter = rand::thread_rng().gen_range(0..=self.retry.base_backoff_ms / 2 + 1);
                std::thread::sleep(Duration::from_millis(backoff + jitter));
            }
        }
        Err(GatewayError::RetriesExhausted {
            attempts: max_attempts,
            last: last_failure,
        })
    }
}

fn snippet(body: &str) -> String {
    let trimmed = body.trim();
    if trimmed.len() > 200 {
        format!("{}…", &trimmed[..200])
    } else {
        trimmed.to_string()
    }
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

/// Deterministic backend: output is a pure function of the request.
///
/// Grammar it understands, given the structured prompts from the extraction
/// module:
///
/// * decompose — each payload line becomes one atomic fact; relative time
///   phrases (`a month ago`, `a week ago`, `a year ago`, `yesterday`) are
///   rewritten against the observation date; a handful of fixture paragraphs
///   decompose into their canonical fact lists.
/// * extract — pipe lines `Subject[:label] | predicate | Object[:label]
///   [| start=DATE] [| end=DATE]` plus fixture sentences and the
///   `X is (no longer) the R of Y since/on DATE` patterns. Predicates whose
///   pipe form carries an end-action marker (`no longer …`, `stopped …`,
///   `ended …`) are emitted affirmatively with validity moved to the end
///   list.
///
/// Anything else earns [`MOCK_REFUSAL`].
pub struct MockBackend;

impl MockBackend {
    pub fn new() -> Self {
        MockBackend
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend::new()
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        match extraction::parse_structured_prompt(&request.user_prompt) {
            Some(extraction::StructuredPrompt {
                task: extraction::PromptTask::Decompose,
                observed_at,
                payload,
            }) => Ok(mock_decompose(&payload, observed_at)),
            Some(extraction::StructuredPrompt {
                task: extraction::PromptTask::Extract,
                observed_at,
                payload,
            }) => Ok(mock_extract(&payload, observed_at)),
            None => Ok(MOCK_REFUSAL.to_string()),
        }
    }
}

const APPENDIX_TRIGGER: &str = "Real Madrid won the Champions League final";

const APPENDIX_FACTS: [&str; 3] = [
    "Real Madrid won the Champions League final match on June 18, 2024.",
    "The Champions League final match ended with a 2-1 victory for Real Madrid on June 18, 2024.",
    "Fans of Real Madrid celebrated the Champions League final match victory across the city on June 18, 2024.",
];

fn mock_decompose(text: &str, observed_at: Option<Timestamp>) -> String {
    if text.contains(APPENDIX_TRIGGER) {
        return APPENDIX_FACTS.join("\n");
    }
    let mut facts = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        facts.push(rewrite_relative_times(line, observed_at));
    }
    facts.join("\n")
}

fn rewrite_relative_times(line: &str, observed_at: Option<Timestamp>) -> String {
    static MONTH_AGO: OnceLock<Regex> = OnceLock::new();
    static WEEK_AGO: OnceLock<Regex> = OnceLock::new();
    static YEAR_AGO: OnceLock<Regex> = OnceLock::new();
    static YESTERDAY: OnceLock<Regex> = OnceLock::new();
    let Some(observed) = observed_at else {
        return line.to_string();
    };
    let date = match chrono::DateTime::from_timestamp(observed.as_unix(), 0) {
        Some(dt) => dt.date_naive(),
        None => return line.to_string(),
    };
    let month_ago = MONTH_AGO
        .get_or_init(|| Regex::new(r"(?i)\b(?:a|one) month ago\b").unwrap());
    let week_ago = WEEK_AGO.get_or_init(|| Regex::new(r"(?i)\b(?:a|one) week ago\b").unwrap());
    let year_ago = YEAR_AGO.get_or_init(|| Regex::new(r"(?i)\b(?:a|one) year ago\b").unwrap());
    let yesterday = YESTERDAY.get_or_init(|| Regex::new(r"(?i)\byesterday\b").unwrap());

    let mut out = line.to_string();
    if let Some(prev) = date.checked_sub_months(chrono::Months::new(1)) {
        out = month_ago
            .replace_all(&out, format!("in {}", prev.format("%B %Y")))
            .into_owned();
    }
    if let Some(prev) = date.checked_sub_days(chrono::Days::new(7)) {
        out = week_ago
            .replace_all(&out, format!("on {}", prev.format("%B %-d, %Y")))
            .into_owned();
    }
    if let Some(prev) = date.checked_sub_months(chrono::Months::new(12)) {
        out = year_ago
            .replace_all(&out, format!("in {}", prev.format("%Y")))
            .into_owned();
    }
    if let Some(prev) = date.checked_sub_days(chrono::Days::new(1)) {
        out = yesterday
            .replace_all(&out, format!("on {}", prev.format("%B %-d, %Y")))
            .into_owned();
    }
    out
}

fn mock_extract(text: &str, _observed_at: Option<Timestamp>) -> String {
    let fact = text.trim();
    let mut tuples = Vec::new();
    if let Some(canned) = canned_tuples(fact) {
        tuples = canned;
    } else if let Some(t) = parse_role_sentence(fact) {
        tuples.push(t);
    } else {
        for line in fact.lines() {
            if let Some(t) = parse_pipe_line(line) {
                tuples.push(t);
            }
        }
    }
    if tuples.is_empty() {
        return MOCK_REFUSAL.to_string();
    }
    serde_json::to_string(&tuples).expect("tuples serialize")
}

fn tuple(
    subject: &str,
    subject_label: &str,
    predicate: &str,
    object: &str,
    object_label: &str,
    t_start: &[&str],
    t_end: &[&str],
) -> RawTuple {
    RawTuple {
        subject: subject.to_string(),
        subject_label: subject_label.to_string(),
        predicate: predicate.to_string(),
        object: object.to_string(),
        object_label: object_label.to_string(),
        t_start: t_start.iter().map(|s| s.to_string()).collect(),
        t_end: t_end.iter().map(|s| s.to_string()).collect(),
    }
}

fn canned_tuples(fact: &str) -> Option<Vec<RawTuple>> {
    let canned = match fact {
        f if f == APPENDIX_FACTS[0] => vec![tuple(
            "Real Madrid",
            "team",
            "won",
            "Champions League final",
            "event",
            &["2024-06-18"],
            &[],
        )],
        f if f == APPENDIX_FACTS[1] => vec![tuple(
            "Champions League final",
            "event",
            "ended with",
            "2-1 victory",
            "score",
            &["2024-06-18"],
            &[],
        )],
        f if f == APPENDIX_FACTS[2] => vec![tuple(
            "Fans of Real Madrid",
            "group",
            "celebrated",
            "Champions League final",
            "event",
            &["2024-06-18"],
            &[],
        )],
        "By January 24, 2020, the coronavirus had killed 26 people in China." => vec![tuple(
            "coronavirus",
            "virus",
            "killed people in",
            "China",
            "location",
            &[],
            &["2020-01-24"],
        )],
        "By January 27, 2020, the coronavirus had killed at least 80 people in China." => {
            vec![tuple(
                "coronavirus",
                "virus",
                "killed people in",
                "China",
                "location",
                &[],
                &["2020-01-27"],
            )]
        }
        "In the week of April 13, 2020, protesters gathered at state capitols across the United States." => {
            vec![tuple(
                "protesters",
                "group",
                "gathered at",
                "state capitols",
                "location",
                &["2020-04-13"],
                &["2020-04-19"],
            )]
        }
        "In the week of April 19, 2020, protesters gathered at state capitols across the United States." => {
            vec![tuple(
                "protesters",
                "group",
                "gathered at",
                "state capitols",
                "location",
                &["2020-04-19"],
                &["2020-04-25"],
            )]
        }
        _ => return None,
    };
    Some(canned)
}

/// `X is the R of Y since DATE.` starts a role; `X is no longer the R of Y on
/// DATE.` ends it. Both emit the affirmative predicate, the end form
/// populating only the end-validity list.
fn parse_role_sentence(fact: &str) -> Option<RawTuple> {
    static START: OnceLock<Regex> = OnceLock::new();
    static END: OnceLock<Regex> = OnceLock::new();
    let start = START.get_or_init(|| {
        Regex::new(r"^(?P<s>.+?) is (?:the )?(?P<r>.+?) of (?P<o>.+?) since (?P<d>.+?)\.?$")
            .unwrap()
    });
    let end = END.get_or_init(|| {
        Regex::new(
            r"^(?P<s>.+?) is no longer (?:the )?(?P<r>.+?) of (?P<o>.+?) on (?P<d>.+?)\.?$",
        )
        .unwrap()
    });
    if let Some(caps) = end.captures(fact) {
        let date = caps.name("d").unwrap().as_str();
        if Timestamp::parse(date).is_ok() {
            return Some(tuple(
                caps.name("s").unwrap().as_str(),
                "person",
                &format!("is {}", caps.name("r").unwrap().as_str()),
                caps.name("o").unwrap().as_str(),
                "organization",
                &[],
                &[date],
            ));
        }
    }
    if let Some(caps) = start.captures(fact) {
        let date = caps.name("d").unwrap().as_str();
        if Timestamp::parse(date).is_ok() {
            return Some(tuple(
                caps.name("s").unwrap().as_str(),
                "person",
                &format!("is {}", caps.name("r").unwrap().as_str()),
                caps.name("o").unwrap().as_str(),
                "organization",
                &[date],
                &[],
            ));
        }
    }
    None
}

fn parse_pipe_line(line: &str) -> Option<RawTuple> {
    let parts: Vec<&str> = line.split('|').map(str::trim).collect();
    if !(3..=5).contains(&parts.len()) || parts.iter().any(|p| p.is_empty()) {
        return None;
    }
    let (subject, subject_label) = split_labeled(parts[0]);
    let (object, object_label) = split_labeled(parts[2]);
    let mut predicate = parts[1].to_string();
    let mut starts: Vec<String> = Vec::new();
    let mut ends: Vec<String> = Vec::new();
    for part in &parts[3..] {
        if let Some(date) = part.strip_prefix("start=") {
            if Timestamp::parse(date).is_err() {
                return None;
            }
            starts.push(date.trim().to_string());
        } else if let Some(date) = part.strip_prefix("end=") {
            if Timestamp::parse(date).is_err() {
                return None;
            }
            ends.push(date.trim().to_string());
        } else {
            return None;
        }
    }
    // End-action normalization: strip the marker and shift validity to the
    // end list so start/end facts about the same relation match in the merge.
    let lowered = predicate.to_lowercase();
    for marker in ["no longer ", "stopped ", "ended "] {
        if let Some(rest) = lowered.strip_prefix(marker) {
            predicate = rest.to_string();
            ends.append(&mut starts);
            ends.sort();
            ends.dedup();
            break;
        }
    }
    Some(RawTuple {
        subject,
        subject_label,
        predicate,
        object,
        object_label,
        t_start: starts,
        t_end: ends,
    })
}

fn split_labeled(part: &str) -> (String, String) {
    match part.split_once(':') {
        Some((name, label)) if !label.trim().is_empty() => {
            (name.trim().to_string(), label.trim().to_string())
        }
        _ => (part.trim().to_string(), "entity".to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU16, AtomicUsize, Ordering};

    #[test]
    fn mock_is_deterministic() {
        let backend = MockBackend::new();
        let request = CompletionRequest::new("sys", "whatever");
        let a = backend.complete(&request).unwrap();
        let b = backend.complete(&request).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, MOCK_REFUSAL);
    }

    #[test]
    fn pipe_line_parses_labels_and_times() {
        let t = parse_pipe_line("Real Madrid:team | won | final:event | start=2024-06-18")
            .unwrap();
        assert_eq!(t.subject, "Real Madrid");
        assert_eq!(t.subject_label, "team");
        assert_eq!(t.object_label, "event");
        assert_eq!(t.t_start, vec!["2024-06-18".to_string()]);
        assert!(t.t_end.is_empty());
    }

    #[test]
    fn pipe_line_end_action_moves_validity() {
        let t = parse_pipe_line("John Doe:person | no longer is ceo | X:organization | start=2026-01-01")
            .unwrap();
        assert_eq!(t.predicate, "is ceo");
        assert!(t.t_start.is_empty());
        assert_eq!(t.t_end, vec!["2026-01-01".to_string()]);
    }

    #[test]
    fn role_sentences_follow_the_end_action_contract() {
        let ended =
            parse_role_sentence("John Doe is no longer the CEO of X on 01-01-2026").unwrap();
        assert_eq!(ended.predicate, "is CEO");
        assert!(ended.t_start.is_empty());
        assert_eq!(ended.t_end, vec!["01-01-2026".to_string()]);

        let started =
            parse_role_sentence("John Doe is the CEO of X since January 1, 2025.").unwrap();
        assert_eq!(started.t_start, vec!["January 1, 2025".to_string()]);
        assert!(started.t_end.is_empty());
    }

    #[test]
    fn relative_month_rewrite_uses_observation_date() {
        let observed = Timestamp::from_ymd(2020, 3, 1).unwrap();
        let out = rewrite_relative_times("Cases surged a month ago.", Some(observed));
        assert_eq!(out, "Cases surged in February 2020.");
    }

    struct FlakyTransport {
        statuses: Vec<u16>,
        calls: AtomicUsize,
    }

    impl HttpTransport for FlakyTransport {
        fn post_json(
            &self,
            _url: &str,
            _api_key: &str,
            _body: &serde_json::Value,
        ) -> Result<HttpReply, String> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            let status = self.statuses[i.min(self.statuses.len() - 1)];
            if status == 200 {
                Ok(HttpReply {
                    status,
                    body: r#"{"choices":[{"message":{"content":"ok"}}]}"#.into(),
                })
            } else {
                Ok(HttpReply {
                    status,
                    body: "slow down".into(),
                })
            }
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 5,
            base_backoff_ms: 1,
        }
    }

    #[test]
    fn live_retries_429_then_succeeds() {
        let transport = Box::new(FlakyTransport {
            statuses: vec![429, 200],
            calls: AtomicUsize::new(0),
        });
        let backend = LiveBackend::new(
            "https://example.test/v1/chat",
            "m",
            "k",
            fast_retry(),
            transport,
        )
        .unwrap();
        let out = backend
            .complete(&CompletionRequest::new("s", "u"))
            .unwrap();
        assert_eq!(out, "ok");
    }

    #[test]
    fn live_gives_up_after_max_attempts() {
        let calls = AtomicUsize::new(0);
        let backend = LiveBackend::new(
            "https://example.test/v1/chat",
            "m",
            "k",
            RetryPolicy {
                max_attempts: 3,
                base_backoff_ms: 1,
            },
            Box::new(FlakyTransport {
                statuses: vec![429, 429, 429, 429],
                calls,
            }),
        )
        .unwrap();
        let err = backend
            .complete(&CompletionRequest::new("s", "u"))
            .unwrap_err();
        assert!(matches!(
            err,
            GatewayError::RetriesExhausted { attempts: 3, .. }
        ));
    }

    #[test]
    fn auth_failures_do_not_retry() {
        let backend = LiveBackend::new(
            "https://example.test/v1/chat",
            "m",
            "k",
            fast_retry(),
            Box::new(FlakyTransport {
                statuses: vec![401, 200],
                calls: AtomicUsize::new(0),
            }),
        )
        .unwrap();
        let err = backend
            .complete(&CompletionRequest::new("s", "u"))
            .unwrap_err();
        assert!(matches!(err, GatewayError::Auth { status: 401, .. }));
    }

    #[test]
    fn missing_api_key_fails_before_any_request() {
        let config = BackendConfig {
            kind: BackendKind::Live,
            endpoint: "https://example.test/v1/chat".into(),
            model_id: "m".into(),
            api_key_env_var: "ATOM_TEST_KEY_THAT_IS_NOT_SET".into(),
            max_concurrent_requests: 4,
            retry: RetryPolicy::default(),
        };
        assert!(matches!(
            LiveBackend::from_env(&config),
            Err(GatewayError::MissingApiKey { .. })
        ));
    }

    #[test]
    fn malformed_endpoint_is_rejected() {
        let err = LiveBackend::new(
            "not a url",
            "m",
            "k",
            RetryPolicy::default(),
            Box::new(FlakyTransport {
                statuses: vec![200],
                calls: AtomicUsize::new(0),
            }),
        )
        .err()
        .expect("endpoint must be rejected");
        assert!(matches!(err, GatewayError::MalformedEndpoint(_)));
    }

    struct InstrumentedBackend {
        in_flight: AtomicU16,
        peak: AtomicU16,
        fail_index: Option<usize>,
        calls: AtomicUsize,
    }

    impl InstrumentedBackend {
        fn new(fail_index: Option<usize>) -> Self {
            InstrumentedBackend {
                in_flight: AtomicU16::new(0),
                peak: AtomicU16::new(0),
                fail_index,
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl CompletionBackend for InstrumentedBackend {
        fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            self.calls.fetch_add(1, Ordering::SeqCst);
            if let Some(fail) = self.fail_index {
                if request.user_prompt == format!("req-{fail}") {
                    return Err(GatewayError::Http {
                        status: 400,
                        detail: "poisoned".into(),
                    });
                }
            }
            Ok(format!("echo:{}", request.user_prompt))
        }
    }

    #[test]
    fn batch_is_aligned_and_bounded() {
        let backend = Arc::new(InstrumentedBackend::new(None));
        let gateway = Gateway::new(backend.clone(), 40);
        let requests: Vec<CompletionRequest> = (0..100)
            .map(|i| CompletionRequest::new("s", format!("req-{i}")))
            .collect();
        let results = gateway.complete_batch(&requests);
        assert_eq!(results.len(), 100);
        for (i, result) in results.iter().enumerate() {
            assert_eq!(result.as_ref().unwrap(), &format!("echo:req-{i}"));
        }
        assert!(backend.peak.load(Ordering::SeqCst) <= 40);
    }

    #[test]
    fn batch_failure_is_per_slot() {
        let backend = Arc::new(InstrumentedBackend::new(Some(1)));
        let gateway = Gateway::new(backend, 8);
        let requests: Vec<CompletionRequest> = (0..3)
            .map(|i| CompletionRequest::new("s", format!("req-{i}")))
            .collect();
        let results = gateway.complete_batch(&requests);
        assert!(results[0].is_ok());
        assert!(results[1].is_err());
        assert!(results[2].is_ok());
    }

    #[test]
    fn empty_batch_is_empty() {
        let gateway = Gateway::new(Arc::new(MockBackend::new()), 4);
        assert!(gateway.complete_batch(&[]).is_empty());
    }

    #[test]
    fn temperature_outside_range_is_rejected() {
        assert!(CompletionRequest::new("s", "u").with_temperature(2.5).is_err());
        assert!(CompletionRequest::new("s", "u").with_temperature(0.0).is_ok());
    }
}
