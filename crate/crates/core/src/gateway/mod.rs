//! The single point of contact with a completion endpoint.
//!
//! A [`Gateway`] owns the model profile, the token estimator, the retry
//! policy and a concurrency limiter. Every request passes the budget gate in
//! [`Gateway::complete`] before it reaches a [`CompletionBackend`], so an
//! over-budget prompt is never transmitted.

mod error;
mod estimate;
pub mod mock;
pub mod openai;
pub mod synthetic;

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

pub use error::{classify_error, GatewayError, GatewayErrorKind};
pub use estimate::{ClassWeights, HeuristicEstimator, TokenEstimator, DEFAULT_INFLATION};

pub const DEFAULT_CONTEXT_LIMIT: usize = 16385;
pub const DEFAULT_RESPONSE_RESERVE: usize = 2500;
pub const DEFAULT_CONCURRENCY: usize = 4;

/// Stage tags attached to every request. The mock backend keys fixtures by
/// `(stage, prompt hash)`.
pub mod stage {
    pub const CODE: &str = "code";
    pub const THEMES: &str = "themes";
    pub const PERSONAS: &str = "personas";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_name: String,
    pub context_limit: usize,
    pub response_reserve: usize,
    pub temperature: f64,
    pub endpoint_url: String,
}

impl Default for ModelProfile {
    fn default() -> Self {
        Self {
            model_name: "gpt-3.5-turbo-16k".into(),
            context_limit: DEFAULT_CONTEXT_LIMIT,
            response_reserve: DEFAULT_RESPONSE_RESERVE,
            temperature: 0.0,
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
        }
    }
}

impl ModelProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.response_reserve == 0 || self.response_reserve >= self.context_limit {
            return Err(format!(
                "response_reserve {} must lie strictly between 0 and context_limit {}",
                self.response_reserve, self.context_limit
            ));
        }
        Ok(())
    }

    /// Tokens left for the prompt once the response reserve is held back.
    pub fn prompt_capacity(&self) -> usize {
        self.context_limit.saturating_sub(self.response_reserve)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub stage: String,
    pub prompt: String,
    pub max_response_tokens: usize,
    pub estimated_prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens_reported: Option<u64>,
    pub completion_tokens_reported: Option<u64>,
    pub latency_ms: u64,
}

/// What a backend sees on the wire.
#[derive(Debug, Clone, Copy)]
pub struct WireRequest<'a> {
    pub stage: &'a str,
    pub model: &'a str,
    pub prompt: &'a str,
    pub max_tokens: usize,
    pub temperature: f64,
    pub estimated_prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

/// Raw failure from a backend, before classification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendFailure {
    /// The provider answered with a non-success status.
    Http { status: u16, message: String },
    /// No usable answer arrived (timeout, connection reset).
    Transport(String),
    /// A success status whose body could not be understood.
    Malformed(String),
}

impl BackendFailure {
    pub fn classify(&self) -> GatewayError {
        match self {
            BackendFailure::Http { status, message } => classify_error(message, *status),
            BackendFailure::Transport(m) => GatewayError::new(GatewayErrorKind::Transport, m.clone()),
            BackendFailure::Malformed(m) => GatewayError::malformed(m.clone()),
        }
    }
}

pub trait CompletionBackend: Send + Sync {
    fn send(&self, request: &WireRequest<'_>) -> Result<BackendReply, BackendFailure>;
}

/// Hex SHA-256 of a prompt; the mock fixture key.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests and the mock backend.
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            initial_backoff: Duration::ZERO,
            factor: 2.0,
        }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff.mul_f64(self.factor.powi(retry as i32))
    }
}

/// Counting semaphore bounding in-flight calls.
#[derive(Debug)]
struct Limiter {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.freed.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.permits.lock().unwrap_or_else(|p| p.into_inner());
        *free += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn CompletionBackend>,
    profile: ModelProfile,
    estimator: Arc<dyn TokenEstimator>,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("profile", &self.profile)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn CompletionBackend>, profile: ModelProfile) -> Self {
        Self {
            backend,
            profile,
            estimator: Arc::new(HeuristicEstimator::default()),
            retry: RetryPolicy::default(),
            limiter: Limiter::new(DEFAULT_CONCURRENCY),
        }
    }

    pub fn with_estimator(mut self, estimator: Arc<dyn TokenEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, in_flight: usize) -> Self {
        self.limiter = Limiter::new(in_flight);
        self
    }

    pub fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    pub fn estimator(&self) -> &dyn TokenEstimator {
        self.estimator.as_ref()
    }

    pub fn estimate_tokens(&self, text: &str) -> usize {
        self.estimator.estimate(text)
    }

    /// Build a request that reserves the profile's response budget.
    pub fn request(&self, stage: &str, prompt: impl Into<String>) -> CompletionRequest {
        let prompt = prompt.into();
        CompletionRequest {
            stage: stage.to_string(),
            estimated_prompt_tokens: self.estimator.estimate(&prompt),
            max_response_tokens: self.profile.response_reserve,
            prompt,
        }
    }

    /// The budget gate. The estimate is recomputed so a hand-built request
    /// cannot understate its size.
    pub fn check_budget(&self, request: &CompletionRequest) -> Result<usize, GatewayError> {
        let estimate = request
            .estimated_prompt_tokens
            .max(self.estimator.estimate(&request.prompt));
        let total = estimate + request.max_response_tokens;
        if total > self.profile.context_limit {
            return Err(GatewayError::new(
                GatewayErrorKind::ContextOverflow,
                format!(
                    "rejected before transmission: estimated {estimate} prompt tokens + {} response tokens exceeds context limit {}",
                    request.max_response_tokens, self.profile.context_limit
                ),
            ));
        }
        Ok(estimate)
    }

    /// Submit after the budget gate, retrying retryable failures with
    /// exponential backoff.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let estimate = self.check_budget(request)?;
        let wire = WireRequest {
            stage: &request.stage,
            model: &self.profile.model_name,
            prompt: &request.prompt,
            max_tokens: request.max_response_tokens,
            temperature: self.profile.temperature,
            estimated_prompt_tokens: estimate,
        };
        let mut retry = 0u32;
        loop {
            let started = Instant::now();
            let outcome = {
                let _permit = self.limiter.acquire();
                self.backend.send(&wire)
            };
            match outcome {
                Ok(reply) => {
                    return Ok(CompletionResult {
                        text: reply.text,
                        prompt_tokens_reported: reply.prompt_tokens,
                        completion_tokens_reported: reply.completion_tokens,
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Err(failure) => {
                    let err = failure.classify();
                    if !err.retryable || retry >= self.retry.max_retries {
                        return Err(err);
                    }
                    let wait = self.retry.backoff(retry);
                    warn!(stage = request.stage, retry = retry + 1, ?wait, "retrying: {err}");
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                    retry += 1;
                }
            }
        }
    }

    /// Like [`Gateway::complete`] but reports zero latency, so results are
    /// byte-comparable across runs.
    pub fn complete_deterministic(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let mut result = self.complete(request)?;
        result.latency_ms = 0;
        debug!(stage = request.stage, "completion received");
        Ok(result)
    }
}
