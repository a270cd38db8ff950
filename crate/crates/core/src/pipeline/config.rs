use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codebook::DEFAULT_SIMILARITY_THRESHOLD;
use crate::coding::{self, CodeKind, KindSpec};
use crate::corpus::{CleaningRule, CleaningRules, DEFAULT_MAX_WORDS, DEFAULT_MIN_WORDS};
use crate::gateway::{openai, ModelProfile, RetryPolicy, DEFAULT_CONCURRENCY};
use crate::persona::DEFAULT_MAX_DRAWS;
use crate::themes::default_theme_count;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub model_name: String,
    pub context_limit: usize,
    pub response_reserve: usize,
    pub temperature: f64,
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub concurrency: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = ModelProfile::default();
        let r = RetryPolicy::default();
        Self {
            model_name: p.model_name,
            context_limit: p.context_limit,
            response_reserve: p.response_reserve,
            temperature: p.temperature,
            endpoint_url: p.endpoint_url,
            api_key_env: openai::DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 120,
            max_retries: r.max_retries,
            initial_backoff_ms: r.initial_backoff.as_millis() as u64,
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

impl ModelConfig {
    pub fn profile(&self) -> ModelProfile {
        ModelProfile {
            model_name: self.model_name.clone(),
            context_limit: self.context_limit,
            response_reserve: self.response_reserve,
            temperature: self.temperature,
            endpoint_url: self.endpoint_url.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Transcript files, or directories whose `*.txt` files are all used.
    pub inputs: Vec<PathBuf>,
    pub min_words: usize,
    pub max_words: usize,
    /// Replaces the default interview cleaning rules when set.
    pub rules: Option<Vec<CleaningRule>>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            min_words: DEFAULT_MIN_WORDS,
            max_words: DEFAULT_MAX_WORDS,
            rules: None,
        }
    }
}

impl CorpusConfig {
    pub fn cleaning_rules(&self) -> CleaningRules {
        match &self.rules {
            Some(r) => CleaningRules::new(r.clone()),
            None => CleaningRules::interview_defaults(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodingConfig {
    pub max_codes: usize,
    pub max_failure_fraction: f64,
    pub quote_threshold: f64,
    pub workers: usize,
    /// Per-kind definition overrides keyed by kind name.
    pub definitions: BTreeMap<String, String>,
}

impl Default for CodingConfig {
    fn default() -> Self {
        let o = coding::CodingOptions::default();
        Self {
            max_codes: o.max_codes,
            max_failure_fraction: o.max_failure_fraction,
            quote_threshold: o.quote_threshold,
            workers: o.workers,
            definitions: BTreeMap::new(),
        }
    }
}

impl CodingConfig {
    pub fn options(&self) -> coding::CodingOptions {
        coding::CodingOptions {
            max_codes: self.max_codes,
            max_failure_fraction: self.max_failure_fraction,
            quote_threshold: self.quote_threshold,
            workers: self.workers,
        }
    }

    /// Kind specs with overrides applied. Unknown kind names are reported by
    /// [`PipelineConfig::validate`].
    pub fn specs(&self) -> Vec<KindSpec> {
        let mut specs = KindSpec::defaults();
        for (name, definition) in &self.definitions {
            if let Ok(kind) = name.parse::<CodeKind>() {
                if let Some(s) = specs.iter_mut().find(|s| s.kind == kind) {
                    s.definition = definition.clone();
                }
            }
        }
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub similarity_threshold: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThemeCounts {
    pub behaviours: usize,
    pub frustrations: usize,
    pub goals: usize,
    pub traits: usize,
}

impl Default for ThemeCounts {
    fn default() -> Self {
        Self {
            behaviours: default_theme_count(CodeKind::Behaviour),
            frustrations: default_theme_count(CodeKind::Frustration),
            goals: default_theme_count(CodeKind::Goal),
            traits: default_theme_count(CodeKind::PersonalityTrait),
        }
    }
}

impl ThemeCounts {
    pub fn get(&self, kind: CodeKind) -> usize {
        match kind {
            CodeKind::Behaviour => self.behaviours,
            CodeKind::Frustration => self.frustrations,
            CodeKind::Goal => self.goals,
            CodeKind::PersonalityTrait => self.traits,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThemesConfig {
    pub counts: ThemeCounts,
    /// Cap on the per-theme token estimate. The budget derived from the
    /// model profile is used when unset or larger.
    pub max_theme_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonasConfig {
    pub count: usize,
    pub max_draws: usize,
    pub workers: usize,
}

impl Default for PersonasConfig {
    fn default() -> Self {
        Self {
            count: 5,
            max_draws: DEFAULT_MAX_DRAWS,
            workers: DEFAULT_CONCURRENCY,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsConfig {
    /// Base seed for theme selection; persona `i` uses `base + i`.
    pub personas: Option<u64>,
    pub mock: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Fixture file or directory consulted before the synthetic responder.
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub coding: CodingConfig,
    pub codebook: CodebookConfig,
    pub themes: ThemesConfig,
    pub personas: PersonasConfig,
    pub seeds: SeedsConfig,
    pub mock: MockConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, source: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: source.to_path_buf(),
            source: e,
        })
    }

    /// Read, resolve relative paths against the file's directory and
    /// validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut config = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in &mut self.corpus.inputs {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(f) = &mut self.mock.fixtures {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
    }

    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let m = &self.model;
        if let Err(e) = m.profile().validate() {
            v.push(format!("model: {e}"));
        }
        if !(0.0..=2.0).contains(&m.temperature) {
            v.push(format!("model.temperature {} outside [0, 2]", m.temperature));
        }
        if m.api_key_env.trim().is_empty() {
            v.push("model.api_key_env must name an environment variable".into());
        }
        if m.concurrency == 0 {
            v.push("model.concurrency must be at least 1".into());
        }
        if self.corpus.inputs.is_empty() {
            v.push("corpus.inputs is empty".into());
        }
        if self.corpus.min_words == 0 || self.corpus.min_words > self.corpus.max_words {
            v.push(format!(
                "corpus chunk bounds {}..{} need 0 < min_words <= max_words",
                self.corpus.min_words, self.corpus.max_words
            ));
        }
        let c = &self.coding;
        if c.max_codes == 0 {
            v.push("coding.max_codes must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&c.max_failure_fraction) {
            v.push(format!(
                "coding.max_failure_fraction {} outside [0, 1]",
                c.max_failure_fraction
            ));
        }
        if !(0.0..=1.0).contains(&c.quote_threshold) {
            v.push(format!("coding.quote_threshold {} outside [0, 1]", c.quote_threshold));
        }
        if c.workers == 0 {
            v.push("coding.workers must be at least 1".into());
        }
        for name in c.definitions.keys() {
            if name.parse::<CodeKind>().is_err() {
                v.push(format!("coding.definitions: unknown kind {name:?}"));
            }
        }
        let t = self.codebook.similarity_threshold;
        if !(t > 0.0 && t <= 1.0) {
            v.push(format!("codebook.similarity_threshold {t} outside (0, 1]"));
        }
        for kind in CodeKind::ALL {
            let n = self.themes.counts.get(kind);
            if n < 2 {
                v.push(format!(
                    "themes.counts.{} = {n}; at least 2 themes are needed",
                    kind.tag()
                ));
            }
        }
        if self.themes.max_theme_tokens == Some(0) {
            v.push("themes.max_theme_tokens must be positive".into());
        }
        let p = &self.personas;
        if p.count == 0 {
            v.push("personas.count must be at least 1".into());
        }
        if p.max_draws == 0 {
            v.push("personas.max_draws must be at least 1".into());
        }
        if p.workers == 0 {
            v.push("personas.workers must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    /// Copy with fields that cannot change any artifact zeroed out.
    fn semantic(&self) -> Self {
        let mut c = self.clone();
        c.model.timeout_secs = 0;
        c.model.max_retries = 0;
        c.model.initial_backoff_ms = 0;
        c.model.concurrency = 0;
        c.coding.workers = 0;
        c.personas.workers = 0;
        c
    }

    pub fn config_hash(&self) -> String {
        hash_json(&self.semantic())
    }
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.corpus.inputs = vec!["fixtures/interviews".into()];
        c
    }

    #[test]
    fn defaults_validate() {
        assert!(base().validate().is_ok());
        let c = base();
        assert_eq!(c.coding.max_codes, 4);
        assert_eq!(CodeKind::ALL.map(|k| c.themes.counts.get(k)), [11, 11, 11, 8]);
    }

    #[test]
    fn every_violation_listed() {
        let mut c = base();
        c.corpus.min_words = 900;
        c.corpus.max_words = 100;
        c.coding.max_codes = 0;
        c.themes.counts.traits = 1;
        c.model.response_reserve = 20_000;
        let Err(ConfigError::Invalid(v)) = c.validate() else {
            panic!("expected violations")
        };
        assert_eq!(v.len(), 4, "{v:?}");
        let msg = ConfigError::Invalid(v).to_string();
        assert!(msg.contains("coding.max_codes") && msg.contains("themes.counts.traits"));
    }

    #[test]
    fn parses_toml_tree() {
        let text = r#"
            [model]
            context_limit = 8000
            response_reserve = 1000

            [corpus]
            inputs = ["a.txt"]
            min_words = 100
            max_words = 300

            [themes.counts]
            traits = 6

            [seeds]
            personas = 42
        "#;
        let c = PipelineConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(c.model.context_limit, 8000);
        assert_eq!(c.themes.counts.traits, 6);
        assert_eq!(c.themes.counts.goals, 11);
        assert_eq!(c.seeds.personas, Some(42));
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = PipelineConfig::from_toml("[model]\napi_key = \"sk-123\"\n", Path::new("x.toml")).unwrap_err();
        assert!(e.to_string().contains("api_key"));
    }

    #[test]
    fn hash_ignores_parallelism_only() {
        let a = base();
        let mut b = base();
        b.coding.workers = 16;
        b.model.concurrency = 1;
        assert_eq!(a.config_hash(), b.config_hash());
        b.coding.max_codes = 5;
        assert_ne!(a.config_hash(), b.config_hash());
        let mut d = base();
        d.codebook.similarity_threshold = 0.85;
        assert_ne!(a.config_hash(), d.config_hash());
    }
}
