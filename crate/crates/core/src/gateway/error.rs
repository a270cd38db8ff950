use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GatewayErrorKind {
    ContextOverflow,
    RateLimited,
    Transport,
    MalformedResponse,
    ProviderRejection,
}

impl GatewayErrorKind {
    pub fn is_retryable(self) -> bool {
        matches!(self, GatewayErrorKind::RateLimited | GatewayErrorKind::Transport)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayError {
    pub kind: GatewayErrorKind,
    pub detail: String,
    pub retryable: bool,
}

impl GatewayError {
    pub fn new(kind: GatewayErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
            retryable: kind.is_retryable(),
        }
    }

    pub fn malformed(detail: impl Into<String>) -> Self {
        Self::new(GatewayErrorKind::MalformedResponse, detail)
    }
}

impl fmt::Display for GatewayError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

impl std::error::Error for GatewayError {}

const OVERFLOW_MARKERS: &[&str] = &[
    "maximum context length",
    "context_length_exceeded",
    "reduce the length of the messages",
    "context window",
];

/// Map a provider failure onto a [`GatewayError`]. Total: anything
/// unrecognised in the 4xx range is a rejection, 5xx and status 0 (no
/// response at all) are transport failures.
pub fn classify_error(provider_message: &str, status: u16) -> GatewayError {
    let lower = provider_message.to_lowercase();
    let kind = if OVERFLOW_MARKERS.iter().any(|m| lower.contains(m)) {
        GatewayErrorKind::ContextOverflow
    } else if status == 429 || lower.contains("rate limit") {
        GatewayErrorKind::RateLimited
    } else if status == 0 || status == 408 || (500..=599).contains(&status) {
        GatewayErrorKind::Transport
    } else {
        GatewayErrorKind::ProviderRejection
    };
    let detail = if provider_message.is_empty() {
        format!("status {status}")
    } else {
        format!("status {status}: {provider_message}")
    };
    GatewayError::new(kind, detail)
}
