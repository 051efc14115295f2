//! Teacher-model gateway.
//!
//! Every call to a teacher, candidate or policy model goes through
//! [`Gateway::complete`]. The gateway enforces the concurrency limit, retries
//! transient endpoint failures with exponential backoff, emulates `n`-sampling
//! for endpoints without it, and records or replays transcripts keyed by the
//! request fingerprint.

mod http;
mod store;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

pub use http::{HttpBackend, API_KEY_ENV, ENDPOINT_ENV};
pub use store::{StoreError, TeacherTranscript, TranscriptStore};

use crate::canonical::to_canonical_string;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A chat-completion request for `n` sampled completions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub n: u32,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TeacherRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: 1.0,
            top_p: 1.0,
            n: 1,
            max_tokens: 1024,
            seed: None,
        }
    }

    pub fn temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn top_p(mut self, top_p: f64) -> Self {
        self.top_p = top_p;
        self
    }

    pub fn n(mut self, n: u32) -> Self {
        self.n = n;
        self
    }

    pub fn max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    fn check(&self) -> Result<(), GatewayError> {
        if self.n == 0 {
            return Err(GatewayError::InvalidRequest("n must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        Ok(())
    }

    /// The last user message, which carries the instantiated prompt.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Hex SHA-256 of the canonical encoding of `request`.
///
/// Every field participates, including message order, `n` and the sampling
/// parameters.
pub fn fingerprint(request: &TeacherRequest) -> String {
    let canonical = to_canonical_string(request).unwrap_or_else(|_| format!("{request:?}"));
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    /// Rate limits, 5xx responses, timeouts and connection failures.
    #[error("transient endpoint error: {0}")]
    Transient(String),
    #[error("endpoint rejected request: {0}")]
    Fatal(String),
}

/// Something that can produce completions for a request.
#[async_trait]
pub trait CompletionBackend: Send + Sync {
    /// Whether one call can return `n > 1` completions.
    fn supports_n(&self) -> bool {
        true
    }

    async fn complete(&self, request: &TeacherRequest) -> Result<Vec<String>, BackendError>;
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transcript not found for fingerprint {0}")]
    TranscriptNotFound(String),
    #[error("endpoint failed after {attempts} attempts: {message}")]
    Endpoint { attempts: u32, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no completion backend configured")]
    NoBackend,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    /// Call the backend, record nothing.
    Live,
    /// Serve stored transcripts when present, otherwise call the backend and
    /// append the transcript before returning.
    Record,
    /// Serve stored transcripts only; a miss is an error.
    Replay,
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicU64,
    completions_requested: AtomicU64,
    endpoint_calls: AtomicU64,
    retries: AtomicU64,
    failures: AtomicU64,
    replay_hits: AtomicU64,
    in_flight: AtomicU64,
    max_in_flight: AtomicU64,
}

/// Point-in-time copy of the gateway counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayMetrics {
    /// Logical requests issued by callers.
    pub requests: u64,
    /// Sum of `n` over logical requests.
    pub completions_requested: u64,
    /// Backend calls actually made, including retries.
    pub endpoint_calls: u64,
    pub retries: u64,
    pub failures: u64,
    pub replay_hits: u64,
    pub max_in_flight: u64,
}

impl GatewayMetrics {
    pub fn since(&self, earlier: &GatewayMetrics) -> GatewayMetrics {
        GatewayMetrics {
            requests: self.requests - earlier.requests,
            completions_requested: self.completions_requested - earlier.completions_requested,
            endpoint_calls: self.endpoint_calls - earlier.endpoint_calls,
            retries: self.retries - earlier.retries,
            failures: self.failures - earlier.failures,
            replay_hits: self.replay_hits - earlier.replay_hits,
            max_in_flight: self.max_in_flight,
        }
    }
}

/// Shared entry point for all model calls.
pub struct Gateway {
    mode: GatewayMode,
    backend: Option<Arc<dyn CompletionBackend>>,
    store: Option<TranscriptStore>,
    limiter: Semaphore,
    max_concurrency: usize,
    retry: RetryPolicy,
    counters: Counters,
}

impl Gateway {
    pub fn live(backend: Arc<dyn CompletionBackend>, max_concurrency: usize) -> Self {
        Self::build(GatewayMode::Live, Some(backend), None, max_concurrency)
    }

    pub fn record(
        backend: Arc<dyn CompletionBackend>,
        store: TranscriptStore,
        max_concurrency: usize,
    ) -> Self {
        Self::build(
            GatewayMode::Record,
            Some(backend),
            Some(store),
            max_concurrency,
        )
    }

    pub fn replay(store: TranscriptStore, max_concurrency: usize) -> Self {
        Self::build(GatewayMode::Replay, None, Some(store), max_concurrency)
    }

    fn build(
        mode: GatewayMode,
        backend: Option<Arc<dyn CompletionBackend>>,
        store: Option<TranscriptStore>,
        max_concurrency: usize,
    ) -> Self {
        let max_concurrency = max_concurrency.max(1);
        Self {
            mode,
            backend,
            store,
            limiter: Semaphore::new(max_concurrency),
            max_concurrency,
            retry: RetryPolicy::default(),
            counters: Counters::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    pub fn metrics(&self) -> GatewayMetrics {
        let c = &self.counters;
        GatewayMetrics {
            requests: c.requests.load(Ordering::SeqCst),
            completions_requested: c.completions_requested.load(Ordering::SeqCst),
            endpoint_calls: c.endpoint_calls.load(Ordering::SeqCst),
            retries: c.retries.load(Ordering::SeqCst),
            failures: c.failures.load(Ordering::SeqCst),
            replay_hits: c.replay_hits.load(Ordering::SeqCst),
            max_in_flight: c.max_in_flight.load(Ordering::SeqCst),
        }
    }

    /// Returns exactly `request.n` completions.
    pub async fn complete(&self, request: &TeacherRequest) -> Result<Vec<String>, GatewayError> {
        request.check()?;
        self.counters.requests.fetch_add(1, Ordering::SeqCst);
        self.counters
            .completions_requested
            .fetch_add(request.n as u64, Ordering::SeqCst);

        let key = fingerprint(request);
        let _permit = self
            .limiter
            .acquire()
            .await
            .expect("gateway limiter is never closed");
        let _flight = InFlight::enter(&self.counters);

        if let Some(store) = &self.store {
            if let Some(transcript) = store.get(&key) {
                if transcript.completions.len() == request.n as usize {
                    self.counters.replay_hits.fetch_add(1, Ordering::SeqCst);
                    return Ok(transcript.completions);
                }
            }
        }
        if self.mode == GatewayMode::Replay {
            self.counters.failures.fetch_add(1, Ordering::SeqCst);
            return Err(GatewayError::TranscriptNotFound(key));
        }

        let started = Instant::now();
        let completions = match self.sample(request).await {
            Ok(c) => c,
            Err(e) => {
                self.counters.failures.fetch_add(1, Ordering::SeqCst);
                return Err(e);
            }
        };
        if self.mode == GatewayMode::Record {
            if let Some(store) = &self.store {
                store.append(TeacherTranscript {
                    request_fingerprint: key,
                    completions: completions.clone(),
                    latency_ms: started.elapsed().as_millis() as u64,
                    recorded_at: store::unix_millis(),
                })?;
            }
        }
        Ok(completions)
    }

    async fn sample(&self, request: &TeacherRequest) -> Result<Vec<String>, GatewayError> {
        let backend = self.backend.as_ref().ok_or(GatewayError::NoBackend)?;
        if request.n == 1 || backend.supports_n() {
            return self.call_with_retry(backend.as_ref(), request).await;
        }
        // Emulate n-sampling with independent single-completion calls. Seeds
        // are offset per sample so seeded endpoints do not repeat themselves.
        let mut completions = Vec::with_capacity(request.n as usize);
        for i in 0..request.n {
            let single = TeacherRequest {
                n: 1,
                seed: request.seed.map(|s| s.wrapping_add(i as u64)),
                ..request.clone()
            };
            completions.extend(self.call_with_retry(backend.as_ref(), &single).await?);
        }
        Ok(completions)
    }

    async fn call_with_retry(
        &self,
        backend: &dyn CompletionBackend,
        request: &TeacherRequest,
    ) -> Result<Vec<String>, GatewayError> {
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                self.counters.retries.fetch_add(1, Ordering::SeqCst);
                let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                if !delay.is_zero() {
                    tokio::time::sleep(delay).await;
                }
            }
            self.counters.endpoint_calls.fetch_add(1, Ordering::SeqCst);
            match backend.complete(request).await {
                Ok(completions) if completions.len() == request.n as usize => {
                    return Ok(completions)
                }
                Ok(completions) => {
                    last = format!(
                        "expected {} completions, got {}",
                        request.n,
                        completions.len()
                    );
                }
                Err(BackendError::Transient(message)) => {
                    tracing::debug!(attempt, %message, "transient endpoint error");
                    last = message;
                }
                Err(BackendError::Fatal(message)) => {
                    return Err(GatewayError::Endpoint {
                        attempts: attempt + 1,
                        message,
                    })
                }
            }
        }
        Err(GatewayError::Endpoint {
            attempts,
            message: last,
        })
    }
}

struct InFlight<'a>(&'a Counters);

impl<'a> InFlight<'a> {
    fn enter(counters: &'a Counters) -> Self {
        let now = counters.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        counters.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Self(counters)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;

    /// Answers with the call index, optionally failing the first calls.
    struct Counting {
        supports_n: bool,
        fail_first: u32,
        calls: Mutex<u32>,
        delay: Duration,
    }

    impl Counting {
        fn new(supports_n: bool) -> Self {
            Self {
                supports_n,
                fail_first: 0,
                calls: Mutex::new(0),
                delay: Duration::ZERO,
            }
        }
    }

    #[async_trait]
    impl CompletionBackend for Counting {
        fn supports_n(&self) -> bool {
            self.supports_n
        }

        async fn complete(&self, request: &TeacherRequest) -> Result<Vec<String>, BackendError> {
            let call = {
                let mut calls = self.calls.lock().unwrap();
                *calls += 1;
                *calls
            };
            if !self.delay.is_zero() {
                tokio::time::sleep(self.delay).await;
            }
            if call <= self.fail_first {
                return Err(BackendError::Transient("503".into()));
            }
            Ok((0..request.n).map(|i| format!("{call}-{i}")).collect())
        }
    }

    fn no_backoff() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::ZERO,
        }
    }

    fn request() -> TeacherRequest {
        TeacherRequest::new("teacher", "Score this")
            .temperature(1.3)
            .n(2)
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = request();
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        assert_ne!(fingerprint(&a), fingerprint(&a.clone().temperature(0.7)));
        assert_ne!(fingerprint(&a), fingerprint(&a.clone().n(3)));
        assert_ne!(fingerprint(&a), fingerprint(&a.clone().top_p(0.9)));
        assert_ne!(fingerprint(&a), fingerprint(&a.clone().seed(Some(1))));
        assert_ne!(fingerprint(&a), fingerprint(&a.clone().max_tokens(7)));

        let mut two = a.clone();
        two.messages = vec![ChatMessage::user("first"), ChatMessage::assistant("second")];
        let mut swapped = a.clone();
        swapped.messages = vec![ChatMessage::assistant("second"), ChatMessage::user("first")];
        assert_ne!(fingerprint(&two), fingerprint(&swapped));
        assert_eq!(fingerprint(&a).len(), 64);
    }

    #[tokio::test]
    async fn replay_returns_stored_completions() {
        let dir = tempfile::tempdir().unwrap();
        let store = TranscriptStore::open(dir.path().join("t.jsonl")).unwrap();
        let req = request();
        store
            .append(TeacherTranscript {
                request_fingerprint: fingerprint(&req),
                completions: vec!["85".into(), "90".into()],
                latency_ms: 3,
                recorded_at: 0,
            })
            .unwrap();
        let gateway = Gateway::replay(store, 4);
        assert_eq!(gateway.complete(&req).await.unwrap(), vec!["85", "90"]);
        assert_eq!(gateway.metrics().replay_hits, 1);
        assert_eq!(gateway.metrics().endpoint_calls, 0);
    }

    #[tokio::test]
    async fn replay_miss_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let gateway = Gateway::replay(
            TranscriptStore::open(dir.path().join("t.jsonl")).unwrap(),
            1,
        );
        let err = gateway.complete(&request()).await.unwrap_err();
        assert!(matches!(err, GatewayError::TranscriptNotFound(_)));
        assert!(err.to_string().starts_with("transcript not found"));
    }

    #[tokio::test]
    async fn record_persists_before_returning_then_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let backend = Arc::new(Counting::new(true));
        let gateway = Gateway::record(backend, TranscriptStore::open(&path).unwrap(), 2);
        let req = request().n(25);
        let live = gateway.complete(&req).await.unwrap();
        assert_eq!(live.len(), 25);

        let replay = Gateway::replay(TranscriptStore::open(&path).unwrap(), 2);
        assert_eq!(replay.complete(&req).await.unwrap(), live);
    }

    #[tokio::test]
    async fn n_sampling_is_emulated_when_unsupported() {
        let backend = Arc::new(Counting::new(false));
        let gateway = Gateway::live(backend, 1);
        let out = gateway.complete(&request().n(5)).await.unwrap();
        assert_eq!(out.len(), 5);
        let m = gateway.metrics();
        assert_eq!(
            (m.requests, m.completions_requested, m.endpoint_calls),
            (1, 5, 5)
        );
    }

    #[tokio::test]
    async fn transient_errors_are_retried_three_times() {
        let backend = Arc::new(Counting {
            fail_first: 2,
            ..Counting::new(true)
        });
        let gateway = Gateway::live(backend, 1).with_retry(no_backoff());
        assert_eq!(
            gateway.complete(&request()).await.unwrap(),
            vec!["3-0", "3-1"]
        );
        assert_eq!(gateway.metrics().retries, 2);

        let always = Arc::new(Counting {
            fail_first: 10,
            ..Counting::new(true)
        });
        let gateway = Gateway::live(always, 1).with_retry(no_backoff());
        let err = gateway.complete(&request()).await.unwrap_err();
        assert!(matches!(err, GatewayError::Endpoint { attempts: 3, .. }));
        assert_eq!(gateway.metrics().endpoint_calls, 3);
    }

    #[tokio::test]
    async fn invalid_requests_are_rejected() {
        let gateway = Gateway::live(Arc::new(Counting::new(true)), 1);
        assert!(matches!(
            gateway.complete(&request().n(0)).await,
            Err(GatewayError::InvalidRequest(_))
        ));
        assert!(matches!(
            gateway.complete(&request().temperature(-0.1)).await,
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn in_flight_never_exceeds_limit() {
        let backend = Arc::new(Counting {
            delay: Duration::from_millis(5),
            ..Counting::new(true)
        });
        let gateway = Arc::new(Gateway::live(backend, 3));
        let tasks: Vec<_> = (0..40)
            .map(|i| {
                let gateway = gateway.clone();
                tokio::spawn(async move {
                    let req = TeacherRequest::new("m", format!("prompt {i}"));
                    gateway.complete(&req).await.unwrap()
                })
            })
            .collect();
        for t in tasks {
            t.await.unwrap();
        }
        let m = gateway.metrics();
        assert_eq!(m.requests, 40);
        assert!(m.max_in_flight <= 3, "max in flight {}", m.max_in_flight);
        assert!(m.max_in_flight >= 2);
    }
}
