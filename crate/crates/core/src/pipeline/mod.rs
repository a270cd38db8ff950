//! Staged pipeline runner.
//!
//! A run directory holds one subdirectory per stage, a `manifest.json` and a
//! lock file while a runner is active:
//!
//! ```text
//! run/
//!   manifest.json
//!   01-ingest/   corpus.json, chunks.txt
//!   02-code/     codes.json, report.json
//!   03-reduce/   codebook-<kind>.json, codebook-<kind>.txt, merge-log-<kind>.txt
//!   04-themes/   themes-<kind>.json, themes-<kind>.txt
//!   05-personas/ persona-NN.json, persona-NN.md, persona-NN.txt, persona-NN-themes.txt
//! ```
//!
//! Each stage records a hash of its configuration and its upstream stage's
//! hash. A stage whose hash is unchanged and whose outputs are all on disk
//! is skipped unless forced.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    CodebookConfig, CodingConfig, ConfigError, CorpusConfig, MockConfig, ModelConfig, PersonasConfig, PipelineConfig,
    SeedsConfig, ThemeCounts, ThemesConfig,
};

use crate::codebook::{self, Codebook};
use crate::coding::{self, Code, CodeKind};
use crate::corpus::{self, ChunkBounds, CorpusManifest};
use crate::gateway::mock::MockBackend;
use crate::gateway::openai::HttpBackend;
use crate::gateway::synthetic::SyntheticResponder;
use crate::gateway::{CompletionBackend, Gateway, HeuristicEstimator, RetryPolicy};
use crate::persona::{self, PersonaArtifact, RenderFormat};
use crate::themes::{self, ThemeSet};
use config::hash_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Code,
    Reduce,
    Themes,
    Personas,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Ingest,
        Stage::Code,
        Stage::Reduce,
        Stage::Themes,
        Stage::Personas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Code => "code",
            Stage::Reduce => "reduce",
            Stage::Themes => "themes",
            Stage::Personas => "personas",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::Ingest => "01-ingest",
            Stage::Code => "02-code",
            Stage::Reduce => "03-reduce",
            Stage::Themes => "04-themes",
            Stage::Personas => "05-personas",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Ingest => None,
            Stage::Code => Some(Stage::Ingest),
            Stage::Reduce => Some(Stage::Code),
            Stage::Themes => Some(Stage::Reduce),
            Stage::Personas => Some(Stage::Themes),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Success,
    Cached,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub stage_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub status: StageStatus,
    pub started_at: DateTime<Utc>,
    pub duration_ms: u64,
    pub metrics: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub created_at: DateTime<Utc>,
    pub stage_records: Vec<StageRecord>,
    pub seeds: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        Self {
            run_id: format!("run-{}", &config_hash[..12]),
            config_hash: config_hash.to_string(),
            created_at: Utc::now(),
            stage_records: Vec::new(),
            seeds: BTreeMap::new(),
        }
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stage_records.iter().find(|r| r.stage == stage)
    }

    /// Insert or replace, keeping pipeline order. A fresh run of a stage
    /// drops every record downstream of it.
    fn upsert(&mut self, record: StageRecord, invalidate_downstream: bool) {
        let stage = record.stage;
        self.stage_records
            .retain(|r| r.stage != stage && !(invalidate_downstream && r.stage > stage));
        self.stage_records.push(record);
        self.stage_records.sort_by_key(|r| r.stage);
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run directory {0} is locked by another runner (delete the lock file if it is stale)")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0} stage required")]
    UpstreamMissing(Stage),
    #[error("backend: {0}")]
    Backend(String),
    #[error("{stage} stage failed: {message}")]
    StageFailed { stage: Stage, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
        let path = run_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(run_dir.to_path_buf()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    /// Offline: fixtures from the config (if any) first, then the synthetic
    /// responder.
    Mock,
    /// The configured HTTP endpoint; the key is read from the environment.
    Http,
}

/// Expand input entries: files as given, directories to their sorted `*.txt`.
pub fn resolve_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "txt"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

pub struct Runner {
    config: PipelineConfig,
    run_dir: PathBuf,
    gateway: Gateway,
    mock: Option<Arc<MockBackend>>,
    manifest: RunManifest,
    force: bool,
    _lock: RunLock,
}

impl std::fmt::Debug for Runner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runner")
            .field("run_dir", &self.run_dir)
            .field("force", &self.force)
            .finish_non_exhaustive()
    }
}

impl Runner {
    pub fn open(
        mut config: PipelineConfig,
        run_dir: &Path,
        backend: BackendChoice,
        force: bool,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let lock = RunLock::acquire(run_dir)?;
        let manifest_path = run_dir.join("manifest.json");
        let previous: Option<RunManifest> = if manifest_path.exists() {
            Some(read_json(&manifest_path)?)
        } else {
            None
        };

        // Unset seeds reuse the ones recorded by an earlier run, or are drawn
        // once and recorded.
        let recorded = |name: &str| previous.as_ref().and_then(|m| m.seeds.get(name).copied());
        config.seeds.personas = config
            .seeds
            .personas
            .or_else(|| recorded("personas"))
            .or_else(|| Some(rand::random::<u32>() as u64));
        config.seeds.mock = config.seeds.mock.or_else(|| recorded("mock")).or(Some(0));

        let config_hash = config.config_hash();
        let mut manifest = previous.unwrap_or_else(|| RunManifest::new(&config_hash));
        manifest.config_hash = config_hash;
        manifest
            .seeds
            .insert("personas".into(), config.seeds.personas.unwrap_or_default());

        let profile = config.model.profile();
        let (backend, mock, retry): (Arc<dyn CompletionBackend>, _, _) = match backend {
            BackendChoice::Mock => {
                let seed = config.seeds.mock.unwrap_or_default();
                manifest.seeds.insert("mock".into(), seed);
                let m = MockBackend::new(seed)
                    .with_responder(SyntheticResponder)
                    .watch_budget(profile.context_limit, HeuristicEstimator::default());
                if let Some(f) = &config.mock.fixtures {
                    m.load_fixtures(f).map_err(io_err(f))?;
                }
                let m = Arc::new(m);
                (m.clone(), Some(m), RetryPolicy::immediate(config.model.max_retries))
            }
            BackendChoice::Http => {
                let http = HttpBackend::from_env(
                    &profile.endpoint_url,
                    &config.model.api_key_env,
                    Duration::from_secs(config.model.timeout_secs),
                )
                .map_err(PipelineError::Backend)?;
                let retry = RetryPolicy {
                    max_retries: config.model.max_retries,
                    initial_backoff: Duration::from_millis(config.model.initial_backoff_ms),
                    ..RetryPolicy::default()
                };
                (Arc::new(http), None, retry)
            }
        };
        let gateway = Gateway::new(backend, profile)
            .with_retry(retry)
            .with_concurrency(config.model.concurrency);
        Ok(Self {
            config,
            run_dir: run_dir.to_path_buf(),
            gateway,
            mock,
            manifest,
            force,
            _lock: lock,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// The mock backend, when running offline.
    pub fn mock(&self) -> Option<&MockBackend> {
        self.mock.as_deref()
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.run_dir.join(id)
    }

    fn outputs_present(&self, record: &StageRecord) -> bool {
        record.outputs.iter().all(|o| self.path(o).is_file())
    }

    fn upstream_record(&self, stage: Stage) -> Result<Option<StageRecord>, PipelineError> {
        let Some(up) = stage.upstream() else { return Ok(None) };
        match self.manifest.record(up) {
            Some(r) if r.status != StageStatus::Failed && self.outputs_present(r) => Ok(Some(r.clone())),
            _ => Err(PipelineError::UpstreamMissing(up)),
        }
    }

    fn stage_hash(&self, stage: Stage, upstream: Option<&StageRecord>) -> Result<String, PipelineError> {
        let c = &self.config;
        let up = upstream.map(|r| r.stage_hash.clone()).unwrap_or_default();
        let backend = if self.mock.is_some() { "mock" } else { "http" };
        Ok(match stage {
            Stage::Ingest => {
                let mut files = Vec::new();
                for f in resolve_inputs(&c.corpus.inputs)? {
                    let bytes = fs::read(&f).map_err(io_err(&f))?;
                    files.push((
                        f.file_name().map(|n| n.to_string_lossy().into_owned()),
                        hex::encode(Sha256::digest(bytes)),
                    ));
                }
                let corpus = (&c.corpus.min_words, &c.corpus.max_words, &c.corpus.rules);
                hash_json(&(stage, files, corpus))
            }
            Stage::Code => hash_json(&(
                stage,
                up,
                backend,
                &c.model.profile(),
                c.seeds.mock,
                &c.mock,
                (
                    c.coding.max_codes,
                    c.coding.max_failure_fraction,
                    c.coding.quote_threshold,
                    &c.coding.definitions,
                ),
            )),
            Stage::Reduce => hash_json(&(stage, up, &c.codebook)),
            Stage::Themes => hash_json(&(stage, up, backend, &c.model.profile(), c.seeds.mock, &c.mock, &c.themes)),
            Stage::Personas => hash_json(&(
                stage,
                up,
                backend,
                &c.model.profile(),
                c.seeds.mock,
                &c.mock,
                c.seeds.personas,
                c.personas.count,
                c.personas.max_draws,
            )),
        })
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        write_atomic(&self.path("manifest.json"), &to_json(&self.manifest))
    }

    /// Run one stage, or skip it when its record is current.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageRecord, PipelineError> {
        let upstream = self.upstream_record(stage)?;
        let hash = self.stage_hash(stage, upstream.as_ref())?;
        if !self.force {
            if let Some(prev) = self.manifest.record(stage) {
                if prev.stage_hash == hash && prev.status != StageStatus::Failed && self.outputs_present(prev) {
                    let mut cached = prev.clone();
                    cached.status = StageStatus::Cached;
                    cached.duration_ms = 0;
                    tracing::info!(stage = stage.name(), "unchanged, cached");
                    self.manifest.upsert(cached.clone(), false);
                    self.save_manifest()?;
                    return Ok(cached);
                }
            }
        }

        let started_at = Utc::now();
        let clock = Instant::now();
        let mut out = StageOutput::default();
        let inputs = upstream.map(|r| r.outputs).unwrap_or_else(|| {
            resolve_inputs(&self.config.corpus.inputs)
                .unwrap_or_default()
                .iter()
                .map(|p| p.display().to_string())
                .collect()
        });
        let result = match stage {
            Stage::Ingest => self.ingest(&mut out),
            Stage::Code => self.code(&mut out),
            Stage::Reduce => self.reduce(&mut out),
            Stage::Themes => self.themes(&mut out),
            Stage::Personas => self.personas(&mut out),
        };
        let status = if result.is_ok() {
            StageStatus::Success
        } else {
            StageStatus::Failed
        };
        if let Err(e) = &result {
            out.warnings.push(e.to_string());
        }
        let record = StageRecord {
            stage,
            stage_hash: hash,
            inputs,
            outputs: out.outputs,
            status,
            started_at,
            duration_ms: clock.elapsed().as_millis() as u64,
            metrics: out.metrics,
            warnings: out.warnings,
        };
        self.manifest.upsert(record.clone(), true);
        self.save_manifest()?;
        result.map(|_| record)
    }

    pub fn run_all(&mut self) -> Result<Vec<StageRecord>, PipelineError> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn write(&self, out: &mut StageOutput, stage: Stage, name: &str, contents: &[u8]) -> Result<(), PipelineError> {
        let id = format!("{}/{name}", stage.dir());
        write_atomic(&self.path(&id), contents)?;
        out.outputs.push(id);
        Ok(())
    }

    fn ingest(&self, out: &mut StageOutput) -> Result<(), PipelineError> {
        let c = &self.config.corpus;
        let fail = |message: String| PipelineError::StageFailed {
            stage: Stage::Ingest,
            message,
        };
        let files = resolve_inputs(&c.inputs)?;
        let bounds = ChunkBounds::new(c.min_words, c.max_words).map_err(|e| fail(e.to_string()))?;
        let manifest = corpus::ingest(&files, &c.cleaning_rules(), bounds).map_err(|e| fail(e.to_string()))?;
        let mut listing = String::new();
        for ch in &manifest.chunks {
            let _ = writeln!(listing, "{}\t{} words", ch.chunk_id, ch.word_count);
        }
        self.write(out, Stage::Ingest, "corpus.json", &to_json(&manifest))?;
        self.write(out, Stage::Ingest, "chunks.txt", listing.as_bytes())?;
        out.metric("interviews", manifest.interviews.len());
        out.metric("chunks", manifest.chunks.len());
        out.metric("words", manifest.chunks.iter().map(|c| c.word_count).sum());
        Ok(())
    }

    fn code(&self, out: &mut StageOutput) -> Result<(), PipelineError> {
        let manifest: CorpusManifest = read_json(&self.path(&format!("{}/corpus.json", Stage::Ingest.dir())))?;
        let coded = coding::code_corpus(
            &manifest,
            &self.config.coding.specs(),
            &self.gateway,
            &self.config.coding.options(),
        )
        .map_err(|e| {
            let coding::CodingError::TooManyFailures { report, .. } = &e;
            out.warnings.extend(
                report
                    .failures
                    .iter()
                    .map(|f| format!("{} {}: {}", f.kind, f.chunk_id, f.error)),
            );
            PipelineError::StageFailed {
                stage: Stage::Code,
                message: e.to_string(),
            }
        })?;
        let r = &coded.report;
        out.metric("chunks", manifest.chunks.len());
        out.metric("pairs", r.pairs_attempted);
        out.metric("pair_failures", r.failures.len());
        out.metric("reminder_retries", r.reminder_retries);
        out.metric("provenance_flags", r.provenance_flags.len());
        for (kind, n) in &r.raw_codes {
            out.metric(&format!("raw_codes.{}", kind.tag()), *n);
        }
        out.warnings.extend(r.warnings.iter().cloned());
        out.warnings.extend(
            r.failures
                .iter()
                .map(|f| format!("{} {}: {}", f.kind, f.chunk_id, f.error)),
        );
        out.warnings.extend(r.provenance_flags.iter().map(|f| {
            format!(
                "quote of {} not found in {} (similarity {:.2})",
                f.code_id, f.chunk_id, f.similarity
            )
        }));
        self.write(out, Stage::Code, "codes.json", &to_json(&coded.codes))?;
        self.write(out, Stage::Code, "report.json", &to_json(&coded.report))?;
        Ok(())
    }

    fn reduce(&self, out: &mut StageOutput) -> Result<(), PipelineError> {
        let codes: BTreeMap<CodeKind, Vec<Code>> = read_json(&self.path(&format!("{}/codes.json", Stage::Code.dir())))?;
        let threshold = self.config.codebook.similarity_threshold;
        for kind in CodeKind::ALL {
            let raw = codes.get(&kind).map(Vec::as_slice).unwrap_or(&[]);
            let book = if raw.is_empty() {
                Codebook::empty(kind, threshold)
            } else {
                codebook::reduce_with_threshold(raw, threshold).map_err(|e| PipelineError::StageFailed {
                    stage: Stage::Reduce,
                    message: e.to_string(),
                })?
            };
            let tag = kind.tag();
            out.metric(&format!("codebook.{tag}"), book.entries.len());
            self.write(out, Stage::Reduce, &format!("codebook-{tag}.json"), &to_json(&book))?;
            self.write(
                out,
                Stage::Reduce,
                &format!("codebook-{tag}.txt"),
                render_codebook(&book).as_bytes(),
            )?;
            self.write(
                out,
                Stage::Reduce,
                &format!("merge-log-{tag}.txt"),
                codebook::render_merge_log(&book).as_bytes(),
            )?;
        }
        Ok(())
    }

    /// The per-theme token budget in force for this run.
    pub fn theme_budget(&self) -> usize {
        let derived = persona::theme_budget(self.gateway.profile(), self.gateway.estimator());
        self.config.themes.max_theme_tokens.map_or(derived, |m| m.min(derived))
    }

    fn themes(&self, out: &mut StageOutput) -> Result<(), PipelineError> {
        let books: Vec<Codebook> = CodeKind::ALL
            .iter()
            .map(|k| read_json(&self.path(&format!("{}/codebook-{}.json", Stage::Reduce.dir(), k.tag()))))
            .collect::<Result<_, _>>()?;
        let budget = self.theme_budget();
        out.metric("theme_budget_tokens", budget);
        let results = coding::parallel_map(&books, CodeKind::ALL.len(), |book| {
            let (parsed, _) = themes::generate_themes(book, self.config.themes.counts.get(book.kind), &self.gateway)
                .map_err(|e| format!("{}: {e}", book.kind))?;
            let split = themes::split_theme_set(&parsed.set, budget, self.gateway.estimator())
                .map_err(|e| format!("{}: {e}", book.kind))?;
            Ok::<_, String>((split, parsed.warnings))
        });
        let mut errors = Vec::new();
        for (book, result) in books.iter().zip(results) {
            match result {
                Ok((set, warnings)) => {
                    let tag = book.kind.tag();
                    out.metric(&format!("themes.{tag}"), set.base_theme_count());
                    out.metric(&format!("theme_parts.{tag}"), set.themes.len());
                    out.warnings.extend(warnings);
                    self.write(out, Stage::Themes, &format!("themes-{tag}.json"), &to_json(&set))?;
                    self.write(
                        out,
                        Stage::Themes,
                        &format!("themes-{tag}.txt"),
                        render_theme_set(&set).as_bytes(),
                    )?;
                }
                Err(e) => errors.push(e),
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::StageFailed {
                stage: Stage::Themes,
                message: errors.join("; "),
            })
        }
    }

    fn personas(&self, out: &mut StageOutput) -> Result<(), PipelineError> {
        let sets: BTreeMap<CodeKind, ThemeSet> = CodeKind::ALL
            .iter()
            .map(|k| {
                read_json::<ThemeSet>(&self.path(&format!("{}/themes-{}.json", Stage::Themes.dir(), k.tag())))
                    .map(|s| (*k, s))
            })
            .collect::<Result<_, _>>()?;
        let base = self.config.seeds.personas.unwrap_or_default();
        let seeds: Vec<u64> = (0..self.config.personas.count as u64)
            .map(|i| base.wrapping_add(i))
            .collect();
        let results = persona::generate_personas(
            &sets,
            &seeds,
            &self.gateway,
            self.config.personas.max_draws,
            self.config.personas.workers,
        );
        let mut produced = 0;
        let mut misses = 0;
        for (i, result) in results.into_iter().enumerate() {
            match result {
                Ok(artifact) => {
                    produced += 1;
                    if !artifact.quote_check.matched {
                        misses += 1;
                        out.warnings.push(format!(
                            "{}: goal quote not found in its goal themes (similarity {:.2})",
                            artifact.persona_id, artifact.quote_check.similarity
                        ));
                    }
                    out.warnings
                        .extend(artifact.flags.iter().map(|f| format!("{}: {f}", artifact.persona_id)));
                    self.write_persona(out, &artifact, &sets)?;
                }
                Err(e) => out.warnings.push(format!("persona-{:02}: {e}", i + 1)),
            }
        }
        out.metric("personas", produced);
        out.metric("persona_failures", seeds.len() - produced);
        out.metric("quote_misses", misses);
        if let Some(m) = &self.mock {
            out.metric("over_budget_transmissions", m.budget_violations());
        }
        if produced == 0 {
            return Err(PipelineError::StageFailed {
                stage: Stage::Personas,
                message: "no persona could be generated".into(),
            });
        }
        Ok(())
    }

    fn write_persona(
        &self,
        out: &mut StageOutput,
        artifact: &PersonaArtifact,
        sets: &BTreeMap<CodeKind, ThemeSet>,
    ) -> Result<(), PipelineError> {
        let id = &artifact.persona_id;
        let provenance =
            persona::render_provenance(&artifact.selection, sets).map_err(|e| PipelineError::StageFailed {
                stage: Stage::Personas,
                message: e.to_string(),
            })?;
        self.write(out, Stage::Personas, &format!("{id}.json"), &to_json(artifact))?;
        let doc = persona::render_persona(&artifact.persona, RenderFormat::StructuredDocument);
        self.write(out, Stage::Personas, &format!("{id}.md"), doc.as_bytes())?;
        let plain = persona::render_persona(&artifact.persona, RenderFormat::PlainText);
        self.write(out, Stage::Personas, &format!("{id}.txt"), plain.as_bytes())?;
        self.write(out, Stage::Personas, &format!("{id}-themes.txt"), provenance.as_bytes())
    }
}

#[derive(Default)]
struct StageOutput {
    outputs: Vec<String>,
    metrics: BTreeMap<String, u64>,
    warnings: Vec<String>,
}

impl StageOutput {
    fn metric(&mut self, name: &str, value: usize) {
        self.metrics.insert(name.to_string(), value as u64);
    }
}

fn render_codebook(book: &Codebook) -> String {
    let mut out = format!("# {} codebook ({} codes)\n", book.kind, book.entries.len());
    for e in &book.entries {
        let _ = writeln!(out, "\n{} {}\n  {}", e.code_id, e.name, e.description);
        if !e.aliases.is_empty() {
            let _ = writeln!(out, "  aliases: {}", e.aliases.join("; "));
        }
        for q in &e.quotes {
            let _ = writeln!(out, "  [{}] \"{}\"", q.chunk_id, q.quote);
        }
    }
    out
}

fn render_theme_set(set: &ThemeSet) -> String {
    let mut out = format!(
        "# {} themes ({} requested, {} produced)\n",
        set.kind,
        set.requested_count,
        set.base_theme_count()
    );
    for t in &set.themes {
        let _ = writeln!(
            out,
            "\n{} {}\n  {}\n  codes: {}",
            t.theme_id,
            t.name,
            t.description,
            t.member_code_ids.join(", ")
        );
    }
    out
}

/// Human-readable summary of a manifest.
pub fn report(manifest: &RunManifest) -> String {
    if manifest.stage_records.is_empty() {
        return "no stages run\n".into();
    }
    let mut out = format!("{} (config {})\n", manifest.run_id, &manifest.config_hash[..12]);
    if !manifest.seeds.is_empty() {
        let seeds: Vec<String> = manifest.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "seeds: {}", seeds.join(", "));
    }
    for r in &manifest.stage_records {
        let status = match r.status {
            StageStatus::Success => "success",
            StageStatus::Cached => "cached",
            StageStatus::Failed => "FAILED",
        };
        let _ = writeln!(out, "\n{:<9} {:<8} {} ms", r.stage.name(), status, r.duration_ms);
        for (k, v) in &r.metrics {
            let _ = writeln!(out, "  {k}: {v}");
        }
        if !r.warnings.is_empty() {
            let _ = writeln!(out, "  warnings ({}):", r.warnings.len());
            for w in &r.warnings {
                let _ = writeln!(out, "    - {w}");
            }
        }
    }
    out
}

/// Load `manifest.json` from a run directory.
pub fn load_manifest(run_dir: &Path) -> Result<Option<RunManifest>, PipelineError> {
    let path = run_dir.join("manifest.json");
    if path.exists() {
        read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_config(dir: &Path) -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.corpus.inputs = vec![Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/interviews")];
        c.corpus.min_words = 60;
        c.corpus.max_words = 120;
        c.themes.counts = ThemeCounts {
            behaviours: 3,
            frustrations: 3,
            goals: 3,
            traits: 2,
        };
        c.personas.count = 2;
        c.seeds.personas = Some(7);
        let _ = dir;
        c
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn empty_manifest_report() {
        assert_eq!(report(&RunManifest::new(&"0".repeat(64))), "no stages run\n");
    }

    #[test]
    fn personas_need_themes() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Runner::open(fixture_config(dir.path()), dir.path(), BackendChoice::Mock, false).unwrap();
        let e = r.run_stage(Stage::Personas).unwrap_err();
        assert_eq!(e.to_string(), "themes stage required");
    }

    #[test]
    fn rerun_is_cached_and_force_reruns() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut r = Runner::open(fixture_config(dir.path()), dir.path(), BackendChoice::Mock, false).unwrap();
            r.run_stage(Stage::Ingest).unwrap();
            assert_eq!(r.run_stage(Stage::Code).unwrap().status, StageStatus::Success);
        }
        {
            let mut r = Runner::open(fixture_config(dir.path()), dir.path(), BackendChoice::Mock, false).unwrap();
            assert_eq!(r.run_stage(Stage::Code).unwrap().status, StageStatus::Cached);
            assert_eq!(r.mock().unwrap().attempts(), 0);
        }
        let mut r = Runner::open(fixture_config(dir.path()), dir.path(), BackendChoice::Mock, true).unwrap();
        assert_eq!(r.run_stage(Stage::Code).unwrap().status, StageStatus::Success);
        assert!(r.mock().unwrap().attempts() > 0);
    }

    #[test]
    fn lock_excludes_second_runner() {
        let dir = tempfile::tempdir().unwrap();
        let _r = Runner::open(fixture_config(dir.path()), dir.path(), BackendChoice::Mock, false).unwrap();
        let e = Runner::open(fixture_config(dir.path()), dir.path(), BackendChoice::Mock, false).unwrap_err();
        assert!(matches!(e, PipelineError::Locked(_)));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_atomic(&p, b"{}").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"{}");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
