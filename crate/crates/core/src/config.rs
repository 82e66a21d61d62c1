//! Layered run configuration.
//!
//! A single TOML document with one table per module. Each field resolves
//! from, in decreasing priority: a command-line override, an environment
//! variable, the config file, the built-in default. Environment variables
//! are named `METATOX_<SECTION>_<FIELD>` (for example `METATOX_QUERY_TOP_K`);
//! `METATOX_EMBED_URL` is accepted as a short form of `METATOX_EMBEDDER_URL`.
//! Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::detect::DetectConfig;
use crate::embedding::{cached, Embedder, EmbeddingError, RemoteEmbedder, TestEmbedder};
use crate::kg_build::BuildConfig;
use crate::llm_gateway::{GatewayError, GenerationParams, HttpProvider, LlmGateway, LlmProvider, MockProvider, MockRules, RetryPolicy, TemplateSet};
use crate::query::QueryConfig;
use crate::transport::{load_fixtures, ReplayTransport, Transport, UreqTransport};

const SECTIONS: [&str; 5] = ["llm", "embedder", "build", "query", "detect"];

/// Fields whose override values are never read as TOML literals.
/// Relative paths in a config file are taken from the file's directory.
const PATH_FIELDS: [(&str, &str); 4] =
    [("llm", "mock_rules"), ("llm", "fixtures"), ("llm", "templates"), ("embedder", "cache")];

const TEXT_FIELDS: [&str; 10] = [
    "llm.url",
    "llm.key",
    "llm.model",
    "llm.mock_rules",
    "llm.fixtures",
    "llm.templates",
    "embedder.url",
    "embedder.key",
    "embedder.model",
    "embedder.cache",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override {0:?}: expected section.field=value")]
    Override(String),
    #[error("{0}")]
    Invalid(String),
    #[error("path for {field} does not exist: {path}")]
    MissingPath { field: String, path: PathBuf },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub provider: ProviderKind,
    pub url: Option<String>,
    pub key: Option<String>,
    pub model: String,
    /// Rules for the mock provider.
    pub mock_rules: Option<PathBuf>,
    /// Recorded responses for the replay provider.
    pub fixtures: Option<PathBuf>,
    /// Overrides the built-in prompt templates.
    pub templates: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub top_logprobs: u32,
}

impl Default for LlmSettings {
    fn default() -> Self {
        let g = GenerationParams::default();
        Self {
            provider: ProviderKind::Mock,
            url: None,
            key: None,
            model: "default".into(),
            mock_rules: None,
            fixtures: None,
            templates: None,
            temperature: g.temperature,
            max_tokens: g.max_tokens,
            max_in_flight: 8,
            max_retries: RetryPolicy::default().max_retries,
            timeout_secs: 60,
            top_logprobs: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Test,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSettings {
    pub kind: EmbedderKind,
    pub url: Option<String>,
    pub key: Option<String>,
    pub model: String,
    pub dimension: usize,
    /// JSONL cache of computed vectors, keyed by text hash and provider.
    pub cache: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        Self { kind: EmbedderKind::Test, url: None, key: None, model: "default".into(), dimension: 256, cache: None, timeout_secs: 60 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub llm: LlmSettings,
    pub embedder: EmbedderSettings,
    pub build: BuildConfig,
    pub query: QueryConfig,
    pub detect: DetectConfig,
}

/// Parses an override or environment value as a TOML scalar, falling back
/// to a bare string.
fn scalar(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set(doc: &mut Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let value = if TEXT_FIELDS.contains(&key) { Value::String(raw.into()) } else { scalar(raw) };
    match key.split_once('.') {
        None if key == "seed" => {
            doc.insert(key.into(), value);
            Ok(())
        }
        Some((section, field)) if SECTIONS.contains(&section) && !field.is_empty() => {
            let entry = doc.entry(section).or_insert_with(|| Value::Table(Table::new()));
            let table = entry.as_table_mut().ok_or_else(|| ConfigError::Parse(format!("{section} must be a table")))?;
            table.insert(field.into(), value);
            Ok(())
        }
        _ => Err(ConfigError::Override(key.into())),
    }
}

/// Maps an environment variable name onto a `section.field` key.
pub fn env_key(name: &str) -> Option<String> {
    let rest = name.strip_prefix("METATOX_")?.to_ascii_lowercase();
    if rest == "seed" {
        return Some(rest);
    }
    if let Some(field) = rest.strip_prefix("embed_") {
        return Some(format!("embedder.{field}"));
    }
    let (section, field) = rest.split_once('_')?;
    SECTIONS.contains(&section).then(|| format!("{section}.{field}"))
}

impl RunConfig {
    /// Resolves every layer. `overrides` are `section.field=value` pairs.
    pub fn resolve<I>(file: Option<&Path>, env: I, overrides: &[(String, String)]) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut doc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
                let mut doc = text.parse::<Table>().map_err(|e| ConfigError::Parse(e.to_string()))?;
                let base = path.parent().unwrap_or(Path::new(""));
                for (section, field) in PATH_FIELDS {
                    if let Some(Value::String(p)) = doc.get_mut(section).and_then(|t| t.get_mut(field)) {
                        if Path::new(p.as_str()).is_relative() {
                            *p = base.join(&*p).to_string_lossy().into_owned();
                        }
                    }
                }
                doc
            }
            None => Table::new(),
        };
        let mut env: Vec<(String, usize, String)> =
            env.into_iter().filter_map(|(name, v)| env_key(&name).map(|k| (k, name.len(), v))).collect();
        // applied in order, so the long form of a name wins over the short one
        env.sort();
        for (k, _, v) in &env {
            set(&mut doc, k, v)?;
        }
        for (k, v) in overrides {
            set(&mut doc, k, v)?;
        }
        let config: RunConfig = Value::Table(doc).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Parses `section.field=value`.
    pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
        s.split_once('=')
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .filter(|(k, _)| !k.is_empty())
            .ok_or_else(|| ConfigError::Override(s.into()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = [
            ("build.entity_threshold", self.build.entity_threshold),
            ("build.relation_threshold", self.build.relation_threshold),
            ("query.mapping_floor", self.query.mapping_floor),
            ("query.rank_floor", self.query.rank_floor),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::Invalid(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        let positive = [
            ("query.top_k", self.query.top_k),
            ("build.parallelism", self.build.parallelism),
            ("detect.parallelism", self.detect.parallelism),
            ("detect.naive_rag_k", self.detect.naive_rag_k),
            ("llm.max_in_flight", self.llm.max_in_flight),
            ("embedder.dimension", self.embedder.dimension),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Fails if a configured input file is absent.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let inputs = [
            ("llm.mock_rules", &self.llm.mock_rules),
            ("llm.fixtures", &self.llm.fixtures),
            ("llm.templates", &self.llm.templates),
        ];
        for (field, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(ConfigError::MissingPath { field: field.into(), path: p.clone() });
                }
            }
        }
        Ok(())
    }

    fn provider(&self) -> Result<Arc<dyn LlmProvider>, ConfigError> {
        let s = &self.llm;
        let http = |transport: Arc<dyn Transport>| -> Result<Arc<dyn LlmProvider>, ConfigError> {
            let url = s.url.clone().ok_or_else(|| ConfigError::Invalid("llm.url is required for this provider".into()))?;
            Ok(Arc::new(
                HttpProvider::new(transport, url, s.key.clone(), s.model.clone())
                    .with_retry(RetryPolicy { max_retries: s.max_retries, ..RetryPolicy::default() })
                    .with_seed(self.seed)
                    .with_top_logprobs(s.top_logprobs),
            ))
        };
        match s.provider {
            ProviderKind::Mock => {
                let rules = match &s.mock_rules {
                    Some(p) => MockRules::from_file(p)?,
                    None => MockRules::default(),
                };
                Ok(Arc::new(MockProvider::new(rules)))
            }
            ProviderKind::Http => http(Arc::new(UreqTransport::new(Duration::from_secs(s.timeout_secs)))),
            ProviderKind::Replay => {
                let path = s.fixtures.as_ref().ok_or_else(|| ConfigError::Invalid("llm.fixtures is required for replay".into()))?;
                let fixtures = load_fixtures(path).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                http(Arc::new(ReplayTransport::new(fixtures)))
            }
        }
    }

    pub fn gateway(&self) -> Result<LlmGateway, ConfigError> {
        let templates = match &self.llm.templates {
            Some(dir) => TemplateSet::from_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        let params = GenerationParams { temperature: self.llm.temperature, max_tokens: self.llm.max_tokens, role: None };
        Ok(LlmGateway::new(self.provider()?, templates).with_params(params).with_max_in_flight(self.llm.max_in_flight))
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>, ConfigError> {
        let s = &self.embedder;
        let inner: Box<dyn Embedder> = match s.kind {
            EmbedderKind::Test => Box::new(TestEmbedder::with_dimension(s.dimension)),
            EmbedderKind::Remote => {
                let url = s.url.clone().ok_or_else(|| ConfigError::Invalid("embedder.url is required for the remote embedder".into()))?;
                let transport = Arc::new(UreqTransport::new(Duration::from_secs(s.timeout_secs)));
                Box::new(RemoteEmbedder::new(transport, url, s.key.clone(), s.model.clone()))
            }
        };
        match &s.cache {
            Some(path) => Ok(Box::new(cached(inner, Some(path))?)),
            None => Ok(inner),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::Strategy;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn file(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn defaults() {
        let c = RunConfig::resolve(None, env(&[]), &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.query.top_k, 10);
        assert_eq!(c.build.entity_threshold, 0.9);
    }

    #[test]
    fn precedence_per_field() {
        let f = file("[query]\ntop_k = 3\nrank_floor = 0.5\nmapping_floor = 0.6\n");
        let e = env(&[("METATOX_QUERY_TOP_K", "4"), ("METATOX_QUERY_RANK_FLOOR", "0.45")]);
        let o = vec![("query.top_k".to_string(), "5".to_string())];
        let c = RunConfig::resolve(Some(f.path()), e, &o).unwrap();
        assert_eq!(c.query.top_k, 5);
        assert_eq!(c.query.rank_floor, 0.45);
        assert_eq!(c.query.mapping_floor, 0.6);
        assert_eq!(c.query.strategy, Strategy::ShortestPath);
    }

    #[test]
    fn named_env_vars() {
        let e = env(&[("METATOX_LLM_URL", "http://x"), ("METATOX_LLM_KEY", "k"), ("METATOX_EMBED_URL", "http://e"), ("HOME", "/root")]);
        let c = RunConfig::resolve(None, e, &[]).unwrap();
        assert_eq!(c.llm.url.as_deref(), Some("http://x"));
        assert_eq!(c.llm.key.as_deref(), Some("k"));
        assert_eq!(c.embedder.url.as_deref(), Some("http://e"));
    }

    #[test]
    fn long_env_name_wins() {
        let e = env(&[("METATOX_EMBEDDER_URL", "http://long"), ("METATOX_EMBED_URL", "http://short")]);
        assert_eq!(RunConfig::resolve(None, e, &[]).unwrap().embedder.url.as_deref(), Some("http://long"));
    }

    #[test]
    fn string_values_stay_strings() {
        let o = vec![("query.strategy".to_string(), "one-hop".to_string()), ("llm.key".to_string(), "123".to_string())];
        let c = RunConfig::resolve(None, env(&[]), &o).unwrap();
        assert_eq!(c.llm.key.as_deref(), Some("123"));
        assert_eq!(c.query.strategy, Strategy::OneHop);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let f = file("[query]\ntopk = 3\n");
        assert!(matches!(RunConfig::resolve(Some(f.path()), env(&[]), &[]), Err(ConfigError::Parse(_))));
        let f = file("[qeury]\ntop_k = 3\n");
        assert!(RunConfig::resolve(Some(f.path()), env(&[]), &[]).is_err());
        assert!(RunConfig::resolve(None, env(&[("METATOX_BUILD_ENTITY_THRESH", "0.8")]), &[]).is_err());
        assert!(matches!(RunConfig::parse_override("nonsense"), Err(ConfigError::Override(_))));
        assert!(RunConfig::resolve(None, env(&[]), &[("nosection".into(), "1".into())]).is_err());
    }

    #[test]
    fn threshold_bounds() {
        for bad in ["0", "0.0", "1.5", "-0.2"] {
            let o = vec![("build.entity_threshold".to_string(), bad.to_string())];
            assert!(matches!(RunConfig::resolve(None, env(&[]), &o), Err(ConfigError::Invalid(_))), "{bad}");
        }
        let o = vec![("build.entity_threshold".to_string(), "1.0".to_string())];
        assert!(RunConfig::resolve(None, env(&[]), &o).is_ok());
        let o = vec![("query.top_k".to_string(), "0".to_string())];
        assert!(RunConfig::resolve(None, env(&[]), &o).is_err());
    }

    #[test]
    fn file_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[llm]\nmock_rules = \"rules.json\"\n").unwrap();
        let c = RunConfig::resolve(Some(&path), env(&[]), &[]).unwrap();
        assert_eq!(c.llm.mock_rules, Some(dir.path().join("rules.json")));
        let o = vec![("llm.mock_rules".to_string(), "other.json".to_string())];
        let c = RunConfig::resolve(Some(&path), env(&[]), &o).unwrap();
        assert_eq!(c.llm.mock_rules, Some(PathBuf::from("other.json")));
    }

    #[test]
    fn missing_input_paths() {
        let o = vec![("llm.mock_rules".to_string(), "/definitely/not/here.json".to_string())];
        let c = RunConfig::resolve(None, env(&[]), &o).unwrap();
        assert!(matches!(c.check_paths(), Err(ConfigError::MissingPath { .. })));
    }

    #[test]
    fn http_needs_url() {
        let o = vec![("llm.provider".to_string(), "http".to_string())];
        let c = RunConfig::resolve(None, env(&[]), &o).unwrap();
        assert!(matches!(c.gateway(), Err(ConfigError::Invalid(_))));
    }
}
