//! Deterministic offline backend.
//!
//! Replies are looked up by `(stage, prompt hash)` in scripted fixtures
//! first, then delegated to an optional [`Responder`]. A fault schedule can
//! inject failures per attempt, and every transmitted request is recorded so
//! tests can assert what actually left the gateway.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{prompt_hash, BackendFailure, BackendReply, CompletionBackend, TokenEstimator, WireRequest};

/// Produces a reply for prompts no fixture covers.
pub trait Responder: Send + Sync {
    fn respond(&self, stage: &str, prompt: &str, seed: u64) -> Option<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    pub stage: String,
    pub prompt_sha256: String,
    pub response: String,
}

/// On-disk fixture document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureFile {
    pub fixtures: Vec<Fixture>,
}

#[derive(Debug, Clone)]
pub struct FaultRule {
    pub stage: Option<String>,
    pub prompt_contains: Option<String>,
    /// `None` fires forever.
    pub remaining: Option<usize>,
    pub failure: BackendFailure,
}

impl FaultRule {
    pub fn always(failure: BackendFailure) -> Self {
        Self {
            stage: None,
            prompt_contains: None,
            remaining: None,
            failure,
        }
    }

    pub fn times(n: usize, failure: BackendFailure) -> Self {
        Self {
            remaining: Some(n),
            ..Self::always(failure)
        }
    }

    pub fn for_stage(mut self, stage: &str) -> Self {
        self.stage = Some(stage.to_string());
        self
    }

    pub fn when_prompt_contains(mut self, needle: &str) -> Self {
        self.prompt_contains = Some(needle.to_string());
        self
    }

    fn matches(&self, req: &WireRequest<'_>) -> bool {
        self.remaining != Some(0)
            && self.stage.as_deref().is_none_or(|s| s == req.stage)
            && self.prompt_contains.as_deref().is_none_or(|n| req.prompt.contains(n))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub stage: String,
    pub prompt_sha256: String,
    pub estimated_prompt_tokens: usize,
    pub max_tokens: usize,
    pub response: Option<String>,
}

struct BudgetWatch {
    context_limit: usize,
    estimator: Box<dyn TokenEstimator>,
}

#[derive(Default)]
struct MockState {
    faults: Vec<FaultRule>,
    attempts: usize,
    transmitted: Vec<RecordedRequest>,
    violations: usize,
}

pub struct MockBackend {
    seed: u64,
    fixtures: Mutex<HashMap<(String, String), String>>,
    responder: Option<Box<dyn Responder>>,
    watch: Option<BudgetWatch>,
    state: Mutex<MockState>,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend")
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            fixtures: Mutex::new(HashMap::new()),
            responder: None,
            watch: None,
            state: Mutex::new(MockState::default()),
        }
    }

    pub fn with_responder(mut self, responder: impl Responder + 'static) -> Self {
        self.responder = Some(Box::new(responder));
        self
    }

    /// Count every transmitted request whose re-estimated prompt plus
    /// `max_tokens` exceeds `context_limit`.
    pub fn watch_budget(mut self, context_limit: usize, estimator: impl TokenEstimator + 'static) -> Self {
        self.watch = Some(BudgetWatch {
            context_limit,
            estimator: Box::new(estimator),
        });
        self
    }

    pub fn script(&self, stage: &str, prompt: &str, response: impl Into<String>) {
        self.script_hash(stage, &prompt_hash(prompt), response);
    }

    pub fn script_hash(&self, stage: &str, hash: &str, response: impl Into<String>) {
        self.fixtures
            .lock()
            .unwrap()
            .insert((stage.to_string(), hash.to_string()), response.into());
    }

    pub fn add_fixtures(&self, file: &FixtureFile) {
        for f in &file.fixtures {
            self.script_hash(&f.stage, &f.prompt_sha256, f.response.clone());
        }
    }

    /// Load one fixture file, or every `*.json` file in a directory.
    pub fn load_fixtures(&self, path: &Path) -> std::io::Result<usize> {
        let mut files = Vec::new();
        if path.is_dir() {
            for entry in fs::read_dir(path)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let mut n = 0;
        for file in files {
            let doc: FixtureFile = serde_json::from_str(&fs::read_to_string(&file)?).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", file.display()))
            })?;
            n += doc.fixtures.len();
            self.add_fixtures(&doc);
        }
        Ok(n)
    }

    pub fn add_fault(&self, rule: FaultRule) {
        self.state.lock().unwrap().faults.push(rule);
    }

    /// Attempts that reached the backend, including faulted ones.
    pub fn attempts(&self) -> usize {
        self.state.lock().unwrap().attempts
    }

    pub fn transmitted(&self) -> Vec<RecordedRequest> {
        self.state.lock().unwrap().transmitted.clone()
    }

    pub fn budget_violations(&self) -> usize {
        self.state.lock().unwrap().violations
    }

    /// Every successful exchange as a fixture document, sorted by key.
    pub fn export_fixtures(&self) -> FixtureFile {
        let mut fixtures: Vec<Fixture> = self
            .transmitted()
            .into_iter()
            .filter_map(|r| {
                r.response.map(|response| Fixture {
                    stage: r.stage,
                    prompt_sha256: r.prompt_sha256,
                    response,
                })
            })
            .collect();
        fixtures.sort_by(|a, b| (&a.stage, &a.prompt_sha256).cmp(&(&b.stage, &b.prompt_sha256)));
        fixtures.dedup();
        FixtureFile { fixtures }
    }

    fn response_seed(&self, hash: &str) -> u64 {
        let prefix = u64::from_str_radix(&hash[..16], 16).unwrap_or(0);
        self.seed ^ prefix
    }
}

impl CompletionBackend for MockBackend {
    fn send(&self, req: &WireRequest<'_>) -> Result<BackendReply, BackendFailure> {
        let hash = prompt_hash(req.prompt);
        {
            let mut state = self.state.lock().unwrap();
            state.attempts += 1;
            if let Some(w) = &self.watch {
                if w.estimator.estimate(req.prompt) + req.max_tokens > w.context_limit {
                    state.violations += 1;
                }
            }
            let mut record = RecordedRequest {
                stage: req.stage.to_string(),
                prompt_sha256: hash.clone(),
                estimated_prompt_tokens: req.estimated_prompt_tokens,
                max_tokens: req.max_tokens,
                response: None,
            };
            if let Some(rule) = state.faults.iter_mut().find(|r| r.matches(req)) {
                if let Some(n) = rule.remaining.as_mut() {
                    *n -= 1;
                }
                let failure = rule.failure.clone();
                state.transmitted.push(record);
                return Err(failure);
            }
            let scripted = self
                .fixtures
                .lock()
                .unwrap()
                .get(&(req.stage.to_string(), hash.clone()))
                .cloned();
            let text = scripted.or_else(|| {
                self.responder
                    .as_ref()
                    .and_then(|r| r.respond(req.stage, req.prompt, self.response_seed(&hash)))
            });
            record.response = text.clone();
            state.transmitted.push(record);
            match text {
                Some(text) => Ok(BackendReply::text(text)),
                None => Err(BackendFailure::Http {
                    status: 404,
                    message: format!("mock: no fixture for stage {} prompt {}", req.stage, &hash[..12]),
                }),
            }
        }
    }
}
