//! OpenAI-compatible chat completion backend.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendFailure, BackendReply, CompletionBackend, WireRequest};

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Serialize)]
pub struct ChatMessage<'a> {
    pub role: &'a str,
    pub content: &'a str,
}

#[derive(Debug, Serialize)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub messages: Vec<ChatMessage<'a>>,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl<'a> ChatRequest<'a> {
    pub fn from_wire(req: &WireRequest<'a>) -> Self {
        Self {
            model: req.model,
            messages: vec![ChatMessage {
                role: "user",
                content: req.prompt,
            }],
            max_tokens: req.max_tokens,
            temperature: req.temperature,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

/// Decode a success body into a reply.
pub fn parse_chat_response(body: &str) -> Result<BackendReply, BackendFailure> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| BackendFailure::Malformed(format!("response body: {e}")))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendFailure::Malformed("response has no message content".into()))?;
    Ok(BackendReply {
        text,
        prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
        completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
    })
}

/// Pull `error.message` out of an error body, falling back to the raw body.
pub fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| body.trim().to_string())
}

pub struct HttpBackend {
    client: Client,
    endpoint_url: String,
    api_key: String,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint_url", &self.endpoint_url)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(
        endpoint_url: impl Into<String>,
        api_key: impl Into<String>,
        timeout: Duration,
    ) -> reqwest::Result<Self> {
        Ok(Self {
            client: Client::builder().timeout(timeout).build()?,
            endpoint_url: endpoint_url.into(),
            api_key: api_key.into(),
        })
    }

    /// Read the key from `var`; the key is never taken from config or flags.
    pub fn from_env(endpoint_url: impl Into<String>, var: &str, timeout: Duration) -> Result<Self, String> {
        let key = std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?;
        Self::new(endpoint_url, key, timeout).map_err(|e| e.to_string())
    }
}

impl CompletionBackend for HttpBackend {
    fn send(&self, req: &WireRequest<'_>) -> Result<BackendReply, BackendFailure> {
        let response = self
            .client
            .post(&self.endpoint_url)
            .bearer_auth(&self.api_key)
            .json(&ChatRequest::from_wire(req))
            .send()
            .map_err(|e| BackendFailure::Transport(e.to_string()))?;
        let status = response.status();
        let body = response.text().map_err(|e| BackendFailure::Transport(e.to_string()))?;
        if status.is_success() {
            parse_chat_response(&body)
        } else {
            Err(BackendFailure::Http {
                status: status.as_u16(),
                message: error_message(&body),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shape() {
        let wire = WireRequest {
            stage: "code",
            model: "gpt-3.5-turbo-16k",
            prompt: "hi",
            max_tokens: 2500,
            temperature: 0.0,
            estimated_prompt_tokens: 1,
        };
        let v = serde_json::to_value(ChatRequest::from_wire(&wire)).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "model": "gpt-3.5-turbo-16k",
                "messages": [{"role": "user", "content": "hi"}],
                "max_tokens": 2500,
                "temperature": 0.0
            })
        );
    }

    #[test]
    fn parses_success_body() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#;
        let r = parse_chat_response(body).unwrap();
        assert_eq!(r.text, "hello");
        assert_eq!(r.prompt_tokens, Some(12));
    }

    #[test]
    fn empty_choices_is_malformed() {
        assert!(matches!(
            parse_chat_response(r#"{"choices":[]}"#),
            Err(BackendFailure::Malformed(_))
        ));
        assert!(matches!(
            parse_chat_response("<html>"),
            Err(BackendFailure::Malformed(_))
        ));
    }

    #[test]
    fn extracts_error_message() {
        let body = r#"{"error":{"message":"This model's maximum context length is 16385 tokens.","type":"invalid_request_error"}}"#;
        assert_eq!(
            error_message(body),
            "This model's maximum context length is 16385 tokens."
        );
        assert_eq!(error_message("plain text"), "plain text");
    }
}
