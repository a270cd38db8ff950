//! Initial coding: one definition-driven prompt per `(chunk, kind)` pair,
//! parsed into [`Code`] records that remember which chunk they came from.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::warn;

use crate::corpus::{CorpusManifest, TranscriptChunk};
use crate::gateway::{stage, Gateway, GatewayError};
use crate::json_extract;
use crate::text;

pub const DEFAULT_MAX_CODES: usize = 4;
pub const DEFAULT_MAX_FAILURE_FRACTION: f64 = 0.2;
pub const DEFAULT_QUOTE_THRESHOLD: f64 = 0.8;
pub const QUOTE_MAX_LINES: usize = 4;
pub const QUOTE_COLUMNS: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Behaviour,
    Frustration,
    Goal,
    PersonalityTrait,
}

impl CodeKind {
    pub const ALL: [CodeKind; 4] = [
        CodeKind::Behaviour,
        CodeKind::Frustration,
        CodeKind::Goal,
        CodeKind::PersonalityTrait,
    ];

    /// Short plural tag, also the default response key and artifact stem.
    pub fn tag(self) -> &'static str {
        match self {
            CodeKind::Behaviour => "behaviours",
            CodeKind::Frustration => "frustrations",
            CodeKind::Goal => "goals",
            CodeKind::PersonalityTrait => "traits",
        }
    }

    pub fn default_definition(self) -> &'static str {
        match self {
            CodeKind::Behaviour => "User behavior are the actions, interactions, and communications made by individuals while engaging with digital or physical products, or services",
            CodeKind::Frustration => "Frustrations are feelings of dissatisfaction, resulting from obstacles, unmet expectations, or barriers to achieving one's goals.",
            CodeKind::Goal => "User goals are the specific objectives or intentions that individuals aim to accomplish when interacting with a product or service.",
            CodeKind::PersonalityTrait => "User personality traits refer to typical patterns of behavior, thoughts, and emotions of users.",
        }
    }

    fn plural_noun(self) -> &'static str {
        match self {
            CodeKind::Behaviour => "user behaviours",
            CodeKind::Frustration => "user frustrations",
            CodeKind::Goal => "user goals",
            CodeKind::PersonalityTrait => "user personality traits",
        }
    }

    fn singular_noun(self) -> &'static str {
        match self {
            CodeKind::Behaviour => "behaviour",
            CodeKind::Frustration => "frustration",
            CodeKind::Goal => "goal",
            CodeKind::PersonalityTrait => "personality trait",
        }
    }
}

impl fmt::Display for CodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CodeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "behaviours" | "behaviour" | "behaviors" | "behavior" => Ok(CodeKind::Behaviour),
            "frustrations" | "frustration" => Ok(CodeKind::Frustration),
            "goals" | "goal" => Ok(CodeKind::Goal),
            "traits" | "trait" | "personality_trait" | "personality traits" => Ok(CodeKind::PersonalityTrait),
            other => Err(format!("unknown code kind {other:?}")),
        }
    }
}

/// A kind together with the definition and response key used to prompt it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindSpec {
    pub kind: CodeKind,
    pub definition: String,
    pub top_key: String,
}

impl KindSpec {
    pub fn default_for(kind: CodeKind) -> Self {
        Self {
            kind,
            definition: kind.default_definition().to_string(),
            top_key: kind.tag().to_string(),
        }
    }

    pub fn defaults() -> Vec<KindSpec> {
        CodeKind::ALL.into_iter().map(Self::default_for).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub interview_id: String,
    pub chunk_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Code {
    pub code_id: String,
    pub kind: CodeKind,
    pub name: String,
    pub description: String,
    pub quote: String,
    pub provenance: Vec<Provenance>,
}

impl Code {
    pub fn quote_within_limit(&self) -> bool {
        text::wrapped_line_count(&self.quote, QUOTE_COLUMNS) <= QUOTE_MAX_LINES
    }
}

pub fn build_coding_prompt(chunk: &TranscriptChunk, spec: &KindSpec, max_codes: usize) -> String {
    let max_codes = max_codes.max(1);
    let one = spec.kind.singular_noun();
    format!(
        "{definition}\n\n\
         Identify up to {max_codes} relevant {plural} of the interviewee in the text below, provide a name for each {one}, a summary description of the {one} and a quote from the respondent for each {one} no longer than 4 lines\n\n\
         Format the response as a json file keeping names, descriptions and quotes together in the json, and keep them together in '{key}'.\n\n\
         ```{text}```",
        definition = spec.definition,
        plural = spec.kind.plural_noun(),
        key = spec.top_key,
        text = chunk.text,
    )
}

pub fn reminder_line(top_key: &str) -> String {
    format!("Respond with valid json only, under the key '{top_key}'")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCodes {
    pub codes: Vec<Code>,
    pub warnings: Vec<String>,
}

fn entries_under_key<'a>(doc: &'a Value, top_key: &str) -> Option<Vec<(Option<&'a str>, &'a Value)>> {
    let map = doc.as_object()?;
    match json_extract::get_ci(map, top_key)? {
        Value::Array(items) => Some(items.iter().map(|v| (None, v)).collect()),
        Value::Object(named) => Some(named.iter().map(|(k, v)| (Some(k.as_str()), v)).collect()),
        _ => None,
    }
}

/// Parse a coding reply. Entries past `max_codes` are dropped with a
/// warning, as are entries missing a name, description or quote.
pub fn parse_codes(
    response_text: &str,
    spec: &KindSpec,
    chunk: &TranscriptChunk,
    max_codes: usize,
) -> Result<ParsedCodes, GatewayError> {
    let doc = json_extract::parse_relaxed(response_text).map_err(GatewayError::malformed)?;
    let entries = entries_under_key(&doc, &spec.top_key)
        .ok_or_else(|| GatewayError::malformed(format!("response has no '{}' list", spec.top_key)))?;
    let mut warnings = Vec::new();
    let mut codes = Vec::new();
    for (i, (key_name, entry)) in entries.iter().enumerate() {
        let Some(map) = entry.as_object() else {
            warnings.push(format!("{}: entry {} is not an object", chunk.chunk_id, i + 1));
            continue;
        };
        let name = json_extract::string_field(map, &["name", "title", "code"])
            .or_else(|| key_name.map(|s| s.trim().to_string()).filter(|s| !s.is_empty()));
        let description = json_extract::string_field(map, &["description", "summary", "desc"]);
        let quote = json_extract::string_field(map, &["quote", "quotes"]);
        let (Some(name), Some(description), Some(quote)) = (name, description, quote) else {
            warnings.push(format!(
                "{}: entry {} lacks a name, description or quote",
                chunk.chunk_id,
                i + 1
            ));
            continue;
        };
        if codes.len() == max_codes {
            let msg = format!(
                "{}: {} returned more than {max_codes} entries; truncated",
                chunk.chunk_id, spec.kind
            );
            warn!("{msg}");
            warnings.push(msg);
            break;
        }
        let code = Code {
            code_id: format!("{}-{}-{:02}", spec.kind.tag(), chunk.chunk_id, codes.len() + 1),
            kind: spec.kind,
            name,
            description,
            quote,
            provenance: vec![Provenance {
                interview_id: chunk.interview_id.clone(),
                chunk_id: chunk.chunk_id.clone(),
            }],
        };
        if !code.quote_within_limit() {
            warnings.push(format!("{}: quote longer than {QUOTE_MAX_LINES} lines", code.code_id));
        }
        codes.push(code);
    }
    if codes.is_empty() {
        return Err(GatewayError::malformed(format!(
            "no valid entries under '{}'",
            spec.top_key
        )));
    }
    Ok(ParsedCodes { codes, warnings })
}

/// Serialize codes to the reply shape [`parse_codes`] reads.
pub fn render_codes(codes: &[Code], top_key: &str) -> String {
    let items: Vec<Value> = codes
        .iter()
        .map(|c| json!({"name": c.name, "description": c.description, "quote": c.quote}))
        .collect();
    let mut doc = serde_json::Map::new();
    doc.insert(top_key.to_string(), Value::Array(items));
    serde_json::to_string_pretty(&Value::Object(doc)).expect("json values serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodingOptions {
    pub max_codes: usize,
    pub max_failure_fraction: f64,
    pub quote_threshold: f64,
    /// Worker threads; the gateway limiter still bounds in-flight calls.
    pub workers: usize,
}

impl Default for CodingOptions {
    fn default() -> Self {
        Self {
            max_codes: DEFAULT_MAX_CODES,
            max_failure_fraction: DEFAULT_MAX_FAILURE_FRACTION,
            quote_threshold: DEFAULT_QUOTE_THRESHOLD,
            workers: crate::gateway::DEFAULT_CONCURRENCY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub kind: CodeKind,
    pub chunk_id: String,
    pub error: GatewayError,
}

/// A code whose quote could not be located in its source chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceFlag {
    pub code_id: String,
    pub chunk_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodingReport {
    pub pairs_attempted: usize,
    pub pairs_succeeded: usize,
    pub reminder_retries: usize,
    pub raw_codes: BTreeMap<CodeKind, usize>,
    pub failures: Vec<PairFailure>,
    pub provenance_flags: Vec<ProvenanceFlag>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingOutput {
    pub codes: BTreeMap<CodeKind, Vec<Code>>,
    pub report: CodingReport,
}

#[derive(Debug, Error)]
pub enum CodingError {
    #[error("coding aborted: {failed} of {total} (chunk, kind) pairs failed")]
    TooManyFailures {
        failed: usize,
        total: usize,
        report: Box<CodingReport>,
    },
}

struct PairOutcome {
    codes: Vec<Code>,
    warnings: Vec<String>,
    reminder_used: bool,
}

/// Submit one prompt and parse it, with one reminder retry on a malformed
/// reply.
pub(crate) fn complete_with_reminder<T>(
    gateway: &Gateway,
    stage_tag: &str,
    prompt: &str,
    reminder: &str,
    parse: impl Fn(&str) -> Result<T, GatewayError>,
) -> Result<(T, bool), GatewayError> {
    let first = gateway.complete_deterministic(&gateway.request(stage_tag, prompt))?;
    match parse(&first.text) {
        Ok(v) => Ok((v, false)),
        Err(e) if e.kind == crate::gateway::GatewayErrorKind::MalformedResponse => {
            let retry_prompt = format!("{prompt}\n\n{reminder}");
            let second = gateway.complete_deterministic(&gateway.request(stage_tag, retry_prompt))?;
            parse(&second.text).map(|v| (v, true))
        }
        Err(e) => Err(e),
    }
}

fn code_pair(
    gateway: &Gateway,
    chunk: &TranscriptChunk,
    spec: &KindSpec,
    max_codes: usize,
) -> Result<PairOutcome, GatewayError> {
    let prompt = build_coding_prompt(chunk, spec, max_codes);
    let (parsed, reminder_used) =
        complete_with_reminder(gateway, stage::CODE, &prompt, &reminder_line(&spec.top_key), |t| {
            parse_codes(t, spec, chunk, max_codes)
        })?;
    Ok(PairOutcome {
        codes: parsed.codes,
        warnings: parsed.warnings,
        reminder_used,
    })
}

/// Run `f` over `items` on up to `workers` threads, keeping input order.
pub(crate) fn parallel_map<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<O>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

/// Code every `(chunk, kind)` pair. Single failures are recorded; the stage
/// aborts only when the failed fraction exceeds `max_failure_fraction`.
pub fn code_corpus(
    manifest: &CorpusManifest,
    specs: &[KindSpec],
    gateway: &Gateway,
    options: &CodingOptions,
) -> Result<CodingOutput, CodingError> {
    let mut chunks: Vec<&TranscriptChunk> = manifest.chunks.iter().collect();
    chunks.sort_by(|a, b| (&a.interview_id, a.sequence_index).cmp(&(&b.interview_id, b.sequence_index)));
    let mut ordered_specs: Vec<&KindSpec> = specs.iter().collect();
    ordered_specs.sort_by_key(|s| s.kind);

    let pairs: Vec<(&KindSpec, &TranscriptChunk)> = ordered_specs
        .iter()
        .flat_map(|spec| chunks.iter().map(move |c| (*spec, *c)))
        .collect();

    let outcomes = parallel_map(&pairs, options.workers, |(spec, chunk)| {
        code_pair(gateway, chunk, spec, options.max_codes)
    });

    let mut report = CodingReport {
        pairs_attempted: pairs.len(),
        ..CodingReport::default()
    };
    let mut codes: BTreeMap<CodeKind, Vec<Code>> = specs.iter().map(|s| (s.kind, Vec::new())).collect();
    for ((spec, chunk), outcome) in pairs.iter().zip(outcomes) {
        match outcome {
            Ok(out) => {
                report.pairs_succeeded += 1;
                report.reminder_retries += usize::from(out.reminder_used);
                report.warnings.extend(out.warnings);
                for code in &out.codes {
                    let similarity = text::fuzzy_containment(&chunk.text, &code.quote);
                    if similarity < options.quote_threshold {
                        report.provenance_flags.push(ProvenanceFlag {
                            code_id: code.code_id.clone(),
                            chunk_id: chunk.chunk_id.clone(),
                            similarity,
                        });
                    }
                }
                codes.entry(spec.kind).or_default().extend(out.codes);
            }
            Err(error) => {
                warn!(chunk = chunk.chunk_id, kind = %spec.kind, "coding failed: {error}");
                report.failures.push(PairFailure {
                    kind: spec.kind,
                    chunk_id: chunk.chunk_id.clone(),
                    error,
                });
            }
        }
    }
    report.raw_codes = codes.iter().map(|(k, v)| (*k, v.len())).collect();

    let failed = report.failures.len();
    if !pairs.is_empty() && failed as f64 / pairs.len() as f64 > options.max_failure_fraction {
        return Err(CodingError::TooManyFailures {
            failed,
            total: pairs.len(),
            report: Box::new(report),
        });
    }
    Ok(CodingOutput { codes, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(text: &str) -> TranscriptChunk {
        TranscriptChunk {
            chunk_id: "iv-c000".into(),
            interview_id: "iv".into(),
            sequence_index: 0,
            text: text.into(),
            word_count: text::word_count(text),
        }
    }

    #[test]
    fn goal_prompt_carries_definition() {
        let p = build_coding_prompt(&chunk("t"), &KindSpec::default_for(CodeKind::Goal), 4);
        assert!(p.contains("User goals are the specific objectives or intentions"));
        assert!(p.contains("Identify up to 4 relevant user goals"));
    }

    #[test]
    fn trait_prompt_uses_traits_key() {
        let spec = KindSpec::default_for(CodeKind::PersonalityTrait);
        assert_eq!(spec.top_key, "traits");
        let p = build_coding_prompt(&chunk("t"), &spec, 4);
        assert!(p.contains("keep them together in 'traits'"));
        assert!(p.contains("Format the response as a json file"));
    }

    #[test]
    fn prompt_sections_in_order() {
        let spec = KindSpec::default_for(CodeKind::Behaviour);
        let p = build_coding_prompt(&chunk("t"), &spec, 3);
        let def = p.find(&spec.definition).unwrap();
        let ident = p
            .find("identify up to 3")
            .or_else(|| p.find("Identify up to 3"))
            .unwrap();
        let fmt = p.find("Format the response as a json file").unwrap();
        let body = p.find("```t```").unwrap();
        assert!(def < ident && ident < fmt && fmt < body);
    }

    #[test]
    fn prompt_ends_with_delimited_text() {
        let text = "Line one.\n\nLine \"two\" – ünïcode.";
        let p = build_coding_prompt(&chunk(text), &KindSpec::default_for(CodeKind::Frustration), 4);
        assert!(p.ends_with(&format!("```{text}```")));
    }

    #[test]
    fn three_traits_parse() {
        let reply = r#"{"traits": [
            {"name": "Persistence", "description": "Keeps going.", "quote": "I try again tomorrow."},
            {"name": "Curiosity", "description": "Wants to learn.", "quote": "I read about soil."},
            {"name": "Caution", "description": "Tests first.", "quote": "I first test it."}
        ]}"#;
        let spec = KindSpec::default_for(CodeKind::PersonalityTrait);
        let parsed = parse_codes(reply, &spec, &chunk("x"), 4).unwrap();
        assert_eq!(parsed.codes.len(), 3);
        assert!(parsed.codes.iter().all(|c| c.kind == CodeKind::PersonalityTrait));
        assert_eq!(parsed.codes[0].provenance[0].chunk_id, "iv-c000");
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn six_entries_truncate_to_four() {
        let items: Vec<Value> = (0..6)
            .map(|i| json!({"name": format!("n{i}"), "description": "d", "quote": "q"}))
            .collect();
        let reply = json!({ "goals": items }).to_string();
        let parsed = parse_codes(&reply, &KindSpec::default_for(CodeKind::Goal), &chunk("q"), 4).unwrap();
        assert_eq!(parsed.codes.len(), 4);
        assert!(parsed.warnings.iter().any(|w| w.contains("truncated")));
    }

    #[test]
    fn validation_entry_round_trips() {
        let reply = json!({"behaviours": [{
            "name": "Validation",
            "description": "The user uses digital tools to locate problems but validates them by going to the field to ensure that the problem is correctly identified.",
            "quote": "But then I also go to the field to to validate what is a problem, because obviously digital toll can you tell you a lot but sometimes it's not enough."
        }]})
        .to_string();
        let spec = KindSpec::default_for(CodeKind::Behaviour);
        let c = chunk("x");
        let first = parse_codes(&reply, &spec, &c, 4).unwrap().codes;
        let again = parse_codes(&render_codes(&first, &spec.top_key), &spec, &c, 4)
            .unwrap()
            .codes;
        assert_eq!(first, again);
        assert!(first[0].quote.contains("go to the field to to validate"));
    }

    #[test]
    fn malformed_cases() {
        let spec = KindSpec::default_for(CodeKind::Goal);
        let c = chunk("x");
        for reply in [
            "not json",
            r#"{"traits": [{"name":"a","description":"b","quote":"c"}]}"#,
            r#"{"goals": []}"#,
            r#"{"goals": [{"name": "only a name"}]}"#,
        ] {
            let e = parse_codes(reply, &spec, &c, 4).unwrap_err();
            assert_eq!(e.kind, crate::gateway::GatewayErrorKind::MalformedResponse, "{reply}");
        }
    }

    #[test]
    fn accepts_fenced_and_keyed_objects() {
        let reply = "```json\n{\"Goals\": {\"Trust\": {\"description\": \"d\", \"quote\": \"q\"}}}\n```";
        let parsed = parse_codes(reply, &KindSpec::default_for(CodeKind::Goal), &chunk("q"), 4).unwrap();
        assert_eq!(parsed.codes[0].name, "Trust");
    }

    #[test]
    fn long_quote_is_flagged() {
        let long = "word ".repeat(80);
        let reply = json!({"goals": [{"name": "a", "description": "b", "quote": long}]}).to_string();
        let parsed = parse_codes(&reply, &KindSpec::default_for(CodeKind::Goal), &chunk("q"), 4).unwrap();
        assert!(parsed.warnings.iter().any(|w| w.contains("longer than 4 lines")));
    }

    #[test]
    fn kind_round_trips_through_str() {
        for k in CodeKind::ALL {
            assert_eq!(k.tag().parse::<CodeKind>().unwrap(), k);
        }
    }
}
