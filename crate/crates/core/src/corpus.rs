//! Transcript ingestion: rule-driven cleaning and sentence-aware chunking.
//!
//! Cleaning is purely mechanical. Each [`CleaningRule`] removes lines or
//! marker-delimited blocks; whitespace is then collapsed. Chunking fills a
//! chunk greedily up to `max_words` and backtracks to the last sentence end
//! or paragraph break that still leaves at least `min_words` in the chunk.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text;

pub const DEFAULT_MIN_WORDS: usize = 600;
pub const DEFAULT_MAX_WORDS: usize = 1800;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read transcript {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("interview {interview_id} ({path}) is empty after cleaning")]
    EmptyAfterCleaning { interview_id: String, path: PathBuf },
    #[error("duplicate interview id {0}")]
    DuplicateInterviewId(String),
    #[error("invalid chunk bounds: min {min}, max {max} (need 0 < min <= max)")]
    InvalidBounds { min: usize, max: usize },
    #[error("cleaning rule {name}: invalid pattern: {source}")]
    BadRule {
        name: String,
        #[source]
        source: regex::Error,
    },
}

/// One mechanical cleaning step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CleaningRule {
    /// Remove every line matching `pattern`.
    DropLines { name: String, pattern: String },
    /// Remove everything from a line matching `start` through the next line
    /// matching `end`, inclusive. A block with no closing line runs to the
    /// end of the file.
    DropBlock { name: String, start: String, end: String },
}

impl CleaningRule {
    pub fn name(&self) -> &str {
        match self {
            CleaningRule::DropLines { name, .. } | CleaningRule::DropBlock { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningRules {
    #[serde(default)]
    pub rules: Vec<CleaningRule>,
}

impl CleaningRules {
    pub fn new(rules: Vec<CleaningRule>) -> Self {
        Self { rules }
    }

    /// Strips `=== INTERVIEWER INTRODUCTION ===` ... `=== END INTRODUCTION ===`
    /// blocks and bracketed timestamp lines such as `[00:12:31]`.
    pub fn interview_defaults() -> Self {
        Self::new(vec![
            CleaningRule::DropBlock {
                name: "interviewer_intro".into(),
                start: r"^\s*=+\s*INTERVIEWER INTRODUCTION\s*=+\s*$".into(),
                end: r"^\s*=+\s*END INTRODUCTION\s*=+\s*$".into(),
            },
            CleaningRule::DropLines {
                name: "timestamps".into(),
                pattern: r"^\s*\[\d{1,2}:\d{2}(:\d{2})?\]\s*$".into(),
            },
        ])
    }

    fn compile(&self) -> Result<Vec<CompiledRule>, CorpusError> {
        let re = |name: &str, p: &str| {
            Regex::new(p).map_err(|source| CorpusError::BadRule {
                name: name.to_string(),
                source,
            })
        };
        self.rules
            .iter()
            .map(|rule| {
                Ok(match rule {
                    CleaningRule::DropLines { name, pattern } => CompiledRule::Lines(re(name, pattern)?),
                    CleaningRule::DropBlock { name, start, end } => {
                        CompiledRule::Block(re(name, start)?, re(name, end)?)
                    }
                })
            })
            .collect()
    }

    /// Rule names in application order, including the implicit whitespace pass.
    pub fn applied_names(&self) -> Vec<String> {
        self.rules
            .iter()
            .map(|r| r.name().to_string())
            .chain(std::iter::once("collapse_whitespace".to_string()))
            .collect()
    }
}

enum CompiledRule {
    Lines(Regex),
    Block(Regex, Regex),
}

fn apply_rules(raw: &str, rules: &[CompiledRule]) -> String {
    let mut lines: Vec<&str> = raw.lines().collect();
    for rule in rules {
        match rule {
            CompiledRule::Lines(re) => lines.retain(|l| !re.is_match(l)),
            CompiledRule::Block(start, end) => {
                let mut kept = Vec::with_capacity(lines.len());
                let mut inside = false;
                for line in lines {
                    if inside {
                        if end.is_match(line) {
                            inside = false;
                        }
                    } else if start.is_match(line) {
                        inside = true;
                    } else {
                        kept.push(line);
                    }
                }
                lines = kept;
            }
        }
    }
    collapse_whitespace(&lines)
}

/// Collapse intra-line whitespace, fold runs of blank lines into one and trim
/// blank lines at both ends. Paragraph breaks survive as `\n\n`.
fn collapse_whitespace(lines: &[&str]) -> String {
    let mut out = String::new();
    let mut pending_blank = false;
    for line in lines {
        let norm = text::normalize_ws(line);
        if norm.is_empty() {
            pending_blank = !out.is_empty();
            continue;
        }
        if !out.is_empty() {
            out.push_str(if pending_blank { "\n\n" } else { "\n" });
        }
        out.push_str(&norm);
        pending_blank = false;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interview {
    pub interview_id: String,
    pub source_path: String,
    pub raw_text: String,
    pub cleaned_text: String,
}

impl Interview {
    /// Build an interview from in-memory text, applying `rules`.
    pub fn from_text(
        interview_id: impl Into<String>,
        source_path: impl Into<String>,
        raw_text: impl Into<String>,
        rules: &CleaningRules,
    ) -> Result<Self, CorpusError> {
        let interview_id = interview_id.into();
        let source_path = source_path.into();
        let raw_text = raw_text.into();
        let cleaned_text = apply_rules(&raw_text, &rules.compile()?);
        if cleaned_text.is_empty() {
            return Err(CorpusError::EmptyAfterCleaning {
                interview_id,
                path: PathBuf::from(source_path),
            });
        }
        Ok(Self {
            interview_id,
            source_path,
            raw_text,
            cleaned_text,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptChunk {
    pub chunk_id: String,
    pub interview_id: String,
    pub sequence_index: usize,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkBounds {
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for ChunkBounds {
    fn default() -> Self {
        Self {
            min_words: DEFAULT_MIN_WORDS,
            max_words: DEFAULT_MAX_WORDS,
        }
    }
}

impl ChunkBounds {
    pub fn new(min_words: usize, max_words: usize) -> Result<Self, CorpusError> {
        let b = Self { min_words, max_words };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(CorpusError::InvalidBounds {
                min: self.min_words,
                max: self.max_words,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub interviews: Vec<Interview>,
    pub chunks: Vec<TranscriptChunk>,
    pub created_at: DateTime<Utc>,
    pub cleaning_rules_applied: Vec<String>,
}

impl CorpusManifest {
    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn interview(&self, id: &str) -> Option<&Interview> {
        self.interviews.iter().find(|i| i.interview_id == id)
    }

    pub fn chunks_of<'a>(&'a self, interview_id: &'a str) -> impl Iterator<Item = &'a TranscriptChunk> + 'a {
        self.chunks.iter().filter(move |c| c.interview_id == interview_id)
    }
}

fn interview_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

/// Read, clean and chunk every transcript. Paths are processed in sorted
/// order and the interview id is the file stem.
pub fn ingest(paths: &[PathBuf], rules: &CleaningRules, bounds: ChunkBounds) -> Result<CorpusManifest, CorpusError> {
    bounds.validate()?;
    let compiled = rules.compile()?;
    let mut sorted: Vec<&PathBuf> = paths.iter().collect();
    sorted.sort();

    let mut seen = BTreeSet::new();
    let mut interviews = Vec::with_capacity(sorted.len());
    for path in sorted {
        let raw_text = fs::read_to_string(path).map_err(|source| CorpusError::Unreadable {
            path: path.clone(),
            source,
        })?;
        let interview_id = interview_id_for(path);
        if !seen.insert(interview_id.clone()) {
            return Err(CorpusError::DuplicateInterviewId(interview_id));
        }
        let cleaned_text = apply_rules(&raw_text, &compiled);
        if cleaned_text.is_empty() {
            return Err(CorpusError::EmptyAfterCleaning {
                interview_id,
                path: path.clone(),
            });
        }
        interviews.push(Interview {
            interview_id,
            source_path: path.to_string_lossy().into_owned(),
            raw_text,
            cleaned_text,
        });
    }
    manifest_from_interviews(interviews, rules, bounds)
}

/// Chunk already-built interviews into a manifest.
pub fn manifest_from_interviews(
    interviews: Vec<Interview>,
    rules: &CleaningRules,
    bounds: ChunkBounds,
) -> Result<CorpusManifest, CorpusError> {
    let mut chunks = Vec::new();
    let mut hasher = Sha256::new();
    for interview in &interviews {
        hasher.update(interview.interview_id.as_bytes());
        hasher.update([0]);
        hasher.update(interview.cleaned_text.as_bytes());
        hasher.update([0]);
        chunks.extend(chunk(interview, bounds.min_words, bounds.max_words)?);
    }
    let digest = hasher.finalize();
    Ok(CorpusManifest {
        corpus_id: format!("corpus-{}", &hex::encode(digest)[..16]),
        interviews,
        chunks,
        created_at: Utc::now(),
        cleaning_rules_applied: rules.applied_names(),
    })
}

struct WordSpan {
    start: usize,
    end: usize,
    boundary: bool,
}

fn ends_sentence(word: &str) -> bool {
    let core = word.trim_end_matches(['"', '\'', '\u{201d}', '\u{2019}', ')', ']']);
    core.ends_with(['.', '!', '?'])
}

fn word_spans(text: &str) -> Vec<WordSpan> {
    let mut spans: Vec<WordSpan> = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push(WordSpan {
                    start: s,
                    end: i,
                    boundary: ends_sentence(&text[s..i]),
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push(WordSpan {
            start: s,
            end: text.len(),
            boundary: true,
        });
    }
    // A blank line between two words is a paragraph break.
    for i in 0..spans.len().saturating_sub(1) {
        let gap = &text[spans[i].end..spans[i + 1].start];
        if gap.matches('\n').count() >= 2 {
            spans[i].boundary = true;
        }
    }
    spans
}

/// Split one interview into chunks of `min_words..=max_words` words; only the
/// final chunk may fall below `min_words`.
pub fn chunk(interview: &Interview, min_words: usize, max_words: usize) -> Result<Vec<TranscriptChunk>, CorpusError> {
    ChunkBounds::new(min_words, max_words)?;
    let text = interview.cleaned_text.as_str();
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyAfterCleaning {
            interview_id: interview.interview_id.clone(),
            path: PathBuf::from(&interview.source_path),
        });
    }
    let spans = word_spans(text);
    let mut chunks = Vec::new();
    let mut start = 0usize;
    while start < spans.len() {
        let remaining = spans.len() - start;
        let take = if remaining <= max_words {
            remaining
        } else {
            // Largest boundary-terminated length in [min, max], else a hard cut.
            (min_words..=max_words)
                .rev()
                .find(|&len| spans[start + len - 1].boundary)
                .unwrap_or(max_words)
        };
        let end = start + take;
        let slice = &text[spans[start].start..spans[end - 1].end];
        let sequence_index = chunks.len();
        chunks.push(TranscriptChunk {
            chunk_id: format!("{}-c{:03}", interview.interview_id, sequence_index),
            interview_id: interview.interview_id.clone(),
            sequence_index,
            text: slice.to_string(),
            word_count: take,
        });
        start = end;
    }
    Ok(chunks)
}
