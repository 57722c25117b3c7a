//! Run configuration: a TOML file, then `TREEQA_*` environment overrides,
//! then command-line flags (applied by the caller).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineConfig};
use crate::knowledge::web::{self, WebMode, WebRetriever};
use crate::knowledge::{HttpTextRetriever, KgStore, KnowledgeHub, LocalCorpus, SourceId};
use crate::llm::{ChatBackend, Gateway, HttpBackend, HttpBackendConfig, RecordedBackend, ResponseCache, ScriptedBackend};
use crate::operators::OverlapGate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Scripted,
    Recorded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. Empty means
    /// the endpoint takes no key.
    pub api_key_env: String,
    pub script: Option<PathBuf>,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub attempts: u32,
}

impl Default for BackendSettings {
    fn default() -> Self {
        BackendSettings {
            kind: BackendKind::Live,
            base_url: HttpBackendConfig::default().base_url,
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            script: None,
            temperature: 0.0,
            timeout_secs: 120,
            attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WebModeSetting {
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSettings {
    pub enabled: BTreeSet<SourceId>,
    /// JSONL KG dump.
    pub kg: Option<PathBuf>,
    /// Directory of local documents.
    pub corpus: Option<PathBuf>,
    /// Remote text retriever, used when no local corpus is given.
    pub text_endpoint: Option<String>,
    pub web_endpoint: String,
    pub web_key_env: String,
    pub web_mode: WebModeSetting,
    pub web_recordings: Option<PathBuf>,
    pub timeout_secs: u64,
}

impl Default for SourceSettings {
    fn default() -> Self {
        SourceSettings {
            enabled: BTreeSet::new(),
            kg: None,
            corpus: None,
            text_endpoint: None,
            web_endpoint: web::DEFAULT_ENDPOINT.into(),
            web_key_env: web::DEFAULT_KEY_ENV.into(),
            web_mode: WebModeSetting::Live,
            web_recordings: None,
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub max_llm_calls: Option<usize>,
    pub max_retrievals: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSettings,
    pub sources: SourceSettings,
    pub k: usize,
    pub t: f64,
    pub budget: Budgets,
    pub cache_dir: Option<PathBuf>,
    pub concurrency: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: BackendSettings::default(),
            sources: SourceSettings::default(),
            k: 3,
            t: 0.5,
            budget: Budgets::default(),
            cache_dir: None,
            concurrency: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{var}: {message}")]
    Env { var: String, message: String },
    #[error("cannot load {what}: {message}")]
    Load { what: String, message: String },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Applies `TREEQA_*` variables read through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(var: &str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e: T::Err| ConfigError::Env {
                var: var.into(),
                message: e.to_string(),
            })
        }
        if let Some(v) = get("TREEQA_BACKEND") {
            self.backend.kind = match v.as_str() {
                "live" => BackendKind::Live,
                "scripted" => BackendKind::Scripted,
                "recorded" => BackendKind::Recorded,
                other => {
                    return Err(ConfigError::Env {
                        var: "TREEQA_BACKEND".into(),
                        message: format!("unknown backend {other:?}"),
                    })
                }
            };
        }
        if let Some(v) = get("TREEQA_BASE_URL") {
            self.backend.base_url = v;
        }
        if let Some(v) = get("TREEQA_MODEL") {
            self.backend.model = v;
        }
        if let Some(v) = get("TREEQA_SCRIPT") {
            self.backend.script = Some(v.into());
        }
        if let Some(v) = get("TREEQA_SOURCES") {
            self.sources.enabled = crate::knowledge::parse_sources(&v).map_err(|e| ConfigError::Env {
                var: "TREEQA_SOURCES".into(),
                message: e.to_string(),
            })?;
        }
        if let Some(v) = get("TREEQA_K") {
            self.k = parse("TREEQA_K", &v)?;
        }
        if let Some(v) = get("TREEQA_T") {
            self.t = parse("TREEQA_T", &v)?;
        }
        if let Some(v) = get("TREEQA_CACHE_DIR") {
            self.cache_dir = Some(v.into());
        }
        if let Some(v) = get("TREEQA_CONCURRENCY") {
            self.concurrency = parse("TREEQA_CONCURRENCY", &v)?;
        }
        Ok(())
    }

    /// Checks everything that can be checked without touching the network.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.t) {
            return Err(invalid(format!("t must lie in [0, 1], got {}", self.t)));
        }
        if self.sources.enabled.is_empty() {
            return Err(invalid("no knowledge source configured"));
        }
        if self.concurrency == 0 {
            return Err(invalid("concurrency must be at least 1"));
        }
        for s in &self.sources.enabled {
            match s {
                SourceId::Kg if self.sources.kg.is_none() => {
                    return Err(invalid("source kg is enabled but no KG dump is given"))
                }
                SourceId::Text if self.sources.corpus.is_none() && self.sources.text_endpoint.is_none() => {
                    return Err(invalid("source text is enabled but neither a corpus nor an endpoint is given"))
                }
                SourceId::Web
                    if self.sources.web_mode != WebModeSetting::Live && self.sources.web_recordings.is_none() =>
                {
                    return Err(invalid("web record/replay needs a recordings directory"))
                }
                _ => {}
            }
        }
        match self.backend.kind {
            BackendKind::Scripted if self.backend.script.is_none() => {
                Err(invalid("the scripted backend needs a script file"))
            }
            BackendKind::Recorded if self.cache_dir.is_none() => {
                Err(invalid("the recorded backend needs a cache directory"))
            }
            _ => Ok(()),
        }
    }

    pub fn engine_config(&self) -> Result<EngineConfig, ConfigError> {
        Ok(EngineConfig {
            k: self.k,
            gate: OverlapGate::new(self.t).map_err(|e| invalid(e.to_string()))?,
            max_llm_calls: self.budget.max_llm_calls,
            max_retrievals: self.budget.max_retrievals,
        })
    }

    fn gateway(&self, env: &dyn Fn(&str) -> Option<String>) -> Result<Gateway, ConfigError> {
        let load = |what: &str, e: &dyn std::fmt::Display| ConfigError::Load {
            what: what.into(),
            message: e.to_string(),
        };
        let cache = match &self.cache_dir {
            Some(dir) => Some(ResponseCache::open(dir).map_err(|e| load("cache", &e))?),
            None => None,
        };
        let backend: Arc<dyn ChatBackend> = match self.backend.kind {
            BackendKind::Scripted => {
                let path = self.backend.script.as_ref().expect("validated");
                Arc::new(ScriptedBackend::from_file(path).map_err(|e| load("script", &e))?)
            }
            BackendKind::Recorded => Arc::new(RecordedBackend::new(cache.clone().expect("validated"))),
            BackendKind::Live => {
                let api_key = if self.backend.api_key_env.is_empty() {
                    None
                } else {
                    Some(env(&self.backend.api_key_env).ok_or_else(|| {
                        invalid(format!("environment variable {} is not set", self.backend.api_key_env))
                    })?)
                };
                let config = HttpBackendConfig {
                    base_url: self.backend.base_url.clone(),
                    api_key,
                    attempts: self.backend.attempts.max(1),
                    timeout: Duration::from_secs(self.backend.timeout_secs),
                    ..HttpBackendConfig::default()
                };
                Arc::new(HttpBackend::new(config).map_err(|e| load("backend", &e))?)
            }
        };
        let mut gw = Gateway::new(backend, &self.backend.model).with_temperature(self.backend.temperature);
        if let Some(cache) = cache {
            if self.backend.kind != BackendKind::Recorded {
                gw = gw.with_cache(cache);
            }
        }
        Ok(gw)
    }

    fn hub(&self, env: &dyn Fn(&str) -> Option<String>) -> Result<KnowledgeHub, ConfigError> {
        let s = &self.sources;
        let timeout = Duration::from_secs(s.timeout_secs);
        let load = |what: &str, e: &dyn std::fmt::Display| ConfigError::Load {
            what: what.into(),
            message: e.to_string(),
        };
        let mut hub = KnowledgeHub::default();
        for source in &s.enabled {
            hub = match source {
                SourceId::Kg => {
                    let path = s.kg.as_ref().expect("validated");
                    let store = KgStore::load_jsonl(path).map_err(|e| load(&path.display().to_string(), &e))?;
                    hub.with_kg(Arc::new(store))
                }
                SourceId::Text => match (&s.corpus, &s.text_endpoint) {
                    (Some(dir), _) => {
                        let corpus = LocalCorpus::load_dir(dir).map_err(|e| load(&dir.display().to_string(), &e))?;
                        hub.with_text(Arc::new(corpus))
                    }
                    (None, Some(url)) => {
                        let r = HttpTextRetriever::new(url.clone(), timeout).map_err(|e| load("text endpoint", &e))?;
                        hub.with_text(Arc::new(r))
                    }
                    (None, None) => unreachable!("validated"),
                },
                SourceId::Web => {
                    let mode = match s.web_mode {
                        WebModeSetting::Live => WebMode::Live,
                        WebModeSetting::Record => WebMode::Record,
                        WebModeSetting::Replay => WebMode::Replay,
                    };
                    let key = (mode != WebMode::Replay).then(|| env(&s.web_key_env)).flatten();
                    if mode != WebMode::Replay && key.is_none() {
                        return Err(invalid(format!("environment variable {} is not set", s.web_key_env)));
                    }
                    let r = WebRetriever::new(mode, s.web_endpoint.clone(), key, s.web_recordings.clone(), timeout)
                        .map_err(|e| load("web", &e))?;
                    hub.with_web(Arc::new(r))
                }
            };
        }
        Ok(hub)
    }

    /// Validates and assembles an engine. `env` supplies API keys.
    pub fn build_engine(&self, env: &dyn Fn(&str) -> Option<String>) -> Result<Engine, ConfigError> {
        self.validate()?;
        let config = self.engine_config()?;
        let gateway = self.gateway(env)?;
        let hub = self.hub(env)?;
        Ok(Engine::new(hub, Arc::new(gateway), config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_and_toml() {
        let c = RunConfig::default();
        assert_eq!((c.k, c.t), (3, 0.5));
        let c = RunConfig::from_toml(
            r#"
k = 5
t = 0.8
[backend]
kind = "scripted"
script = "s.json"
[sources]
enabled = ["text", "kg"]
corpus = "docs"
kg = "kg.jsonl"
[budget]
max_llm_calls = 40
"#,
        )
        .unwrap();
        assert_eq!(c.k, 5);
        assert_eq!(c.sources.enabled, BTreeSet::from([SourceId::Kg, SourceId::Text]));
        assert_eq!(c.budget.max_llm_calls, Some(40));
        c.validate().unwrap();
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut c = RunConfig::default();
        c.apply_env(|k| match k {
            "TREEQA_K" => Some("7".into()),
            "TREEQA_SOURCES" => Some("web,kg".into()),
            "TREEQA_BACKEND" => Some("recorded".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.k, 7);
        assert_eq!(c.sources.enabled, BTreeSet::from([SourceId::Kg, SourceId::Web]));
        assert_eq!(c.backend.kind, BackendKind::Recorded);
        assert!(c.apply_env(|k| (k == "TREEQA_T").then(|| "high".into())).is_err());
    }

    #[test]
    fn validation_errors() {
        let mut c = RunConfig::default();
        assert!(c.validate().unwrap_err().to_string().contains("no knowledge source"));
        c.sources.enabled = BTreeSet::from([SourceId::Kg]);
        assert!(c.validate().is_err());
        c.sources.kg = Some("kg.jsonl".into());
        c.validate().unwrap();
        c.t = 1.5;
        assert!(c.validate().is_err());
        c.t = 1.0;
        c.backend.kind = BackendKind::Scripted;
        assert!(c.validate().is_err());
        c.backend.kind = BackendKind::Recorded;
        assert!(c.validate().is_err());
    }

    #[test]
    fn live_backend_needs_its_key() {
        let dir = tempfile::tempdir().unwrap();
        let kg = dir.path().join("kg.jsonl");
        std::fs::write(&kg, "").unwrap();
        let mut c = RunConfig::default();
        c.sources.enabled = BTreeSet::from([SourceId::Kg]);
        c.sources.kg = Some(kg);
        let err = c.build_engine(&no_env).err().unwrap();
        assert!(err.to_string().contains("OPENAI_API_KEY"));
        c.build_engine(&|k: &str| (k == "OPENAI_API_KEY").then(|| "x".into())).unwrap();
    }
}
