//! Chat-completion gateway.
//!
//! Every LLM call in the engine goes through [`Gateway::complete`], which
//! checks the per-question budget, consults the response cache, calls the
//! configured backend and records usage on the caller's [`CallMeter`].

mod backend;
mod cache;
pub mod reply;
mod template;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{HttpBackend, HttpBackendConfig, RecordedBackend, ScriptRule, ScriptedBackend};
pub use cache::{CacheKey, CachedResponse, ResponseCache};
pub use template::{render, render_str, TemplateId, Vars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Which template produced the messages. Used by scripted matching only.
    pub template: Option<TemplateId>,
}

impl ChatRequest {
    /// Content of the final user turn, where the per-call task lives.
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }

    fn check(&self) -> Result<(), LlmError> {
        let first_turn = self.messages.iter().find(|m| m.role != Role::System);
        match first_turn {
            Some(m) if m.role == Role::User => Ok(()),
            Some(_) => Err(LlmError::InvalidRequest(
                "first non-system message must be a user turn".into(),
            )),
            None => Err(LlmError::InvalidRequest("request has no user message".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend error: {0}")]
    Backend(String),
    #[error("per-question budget of {limit} LLM calls exhausted")]
    BudgetExceeded { limit: usize },
    #[error("no scripted response matches request {digest} (last user turn starts {preview:?})")]
    ScriptGap { digest: String, preview: String },
    #[error("template {template} needs slot `{slot}`")]
    MissingSlot { template: &'static str, slot: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

pub trait ChatBackend: Send + Sync {
    /// Stable identifier that takes part in cache keys.
    fn id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError>;
}

/// Per-question LLM usage. Shared by reference between the engine and the
/// gateway; all counters are atomic.
#[derive(Debug, Default)]
pub struct CallMeter {
    limit: Option<usize>,
    calls: AtomicUsize,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterSnapshot {
    pub calls: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl CallMeter {
    pub fn new(limit: Option<usize>) -> Self {
        CallMeter {
            limit,
            ..Default::default()
        }
    }

    fn acquire(&self) -> Result<(), LlmError> {
        let prev = self.calls.fetch_add(1, Ordering::SeqCst);
        match self.limit {
            Some(limit) if prev >= limit => {
                self.calls.fetch_sub(1, Ordering::SeqCst);
                Err(LlmError::BudgetExceeded { limit })
            }
            _ => Ok(()),
        }
    }

    fn record(&self, usage: Usage, from_cache: bool) {
        if from_cache {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
        } else {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
        }
        self.prompt_tokens.fetch_add(usage.prompt_tokens, Ordering::SeqCst);
        self.completion_tokens
            .fetch_add(usage.completion_tokens, Ordering::SeqCst);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        MeterSnapshot {
            calls: self.calls.load(Ordering::SeqCst),
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            prompt_tokens: self.prompt_tokens.load(Ordering::SeqCst),
            completion_tokens: self.completion_tokens.load(Ordering::SeqCst),
        }
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    model: String,
    temperature: f64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, model: impl Into<String>) -> Self {
        Gateway {
            backend,
            cache: None,
            model: model.into(),
            temperature: 0.0,
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn backend(&self) -> &dyn ChatBackend {
        self.backend.as_ref()
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Renders `template` with `vars` and completes it.
    pub fn ask(&self, template: TemplateId, vars: &Vars, meter: &CallMeter) -> Result<Completion, LlmError> {
        let messages = render(template, vars)?;
        self.complete(Some(template), messages, meter)
    }

    pub fn complete(
        &self,
        template: Option<TemplateId>,
        messages: Vec<ChatMessage>,
        meter: &CallMeter,
    ) -> Result<Completion, LlmError> {
        let request = ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            template,
        };
        request.check()?;
        meter.acquire()?;
        let key = CacheKey::new(self.backend.id(), &request);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                log::debug!("cache hit {}", key.digest());
                meter.record(hit.usage, true);
                return Ok(Completion {
                    text: hit.response,
                    usage: hit.usage,
                });
            }
        }
        let completion = self.backend.complete(&request)?;
        if let Some(cache) = &self.cache {
            cache.put(
                &key,
                &CachedResponse {
                    response: completion.text.clone(),
                    usage: completion.usage,
                },
            )?;
        }
        meter.record(completion.usage, false);
        Ok(completion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(rules: Vec<ScriptRule>) -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new(rules))
    }

    #[test]
    fn scripted_response_has_zero_usage() {
        let backend = scripted(vec![ScriptRule::contains("Shakira", "web, kg")]);
        let gw = Gateway::new(backend.clone(), "test-model");
        let meter = CallMeter::new(None);
        let vars = Vars::from([
            ("question", "Who is Shakira?".to_string()),
            ("sources", "kg, text, web".to_string()),
        ]);
        let out = gw.ask(TemplateId::SourceSelection, &vars, &meter).unwrap();
        assert_eq!(out.text, "web, kg");
        assert_eq!(out.usage, Usage::default());
        assert_eq!(backend.invocations(), 1);
        assert_eq!(meter.calls(), 1);
    }

    #[test]
    fn cache_hit_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let backend = scripted(vec![ScriptRule::contains("", "ok")]);
        let gw = Gateway::new(backend.clone(), "m").with_cache(ResponseCache::open(dir.path()).unwrap());
        let meter = CallMeter::new(None);
        let msgs = vec![ChatMessage::user("hello")];
        gw.complete(None, msgs.clone(), &meter).unwrap();
        gw.complete(None, msgs, &meter).unwrap();
        assert_eq!(backend.invocations(), 1);
        let snap = meter.snapshot();
        assert_eq!((snap.calls, snap.backend_calls, snap.cache_hits), (2, 1, 1));
    }

    #[test]
    fn budget_is_enforced() {
        let gw = Gateway::new(scripted(vec![ScriptRule::contains("", "ok")]), "m");
        let meter = CallMeter::new(Some(2));
        for _ in 0..2 {
            gw.complete(None, vec![ChatMessage::user("x")], &meter).unwrap();
        }
        let err = gw.complete(None, vec![ChatMessage::user("x")], &meter).unwrap_err();
        assert!(matches!(err, LlmError::BudgetExceeded { limit: 2 }));
        assert_eq!(meter.calls(), 2);
    }

    #[test]
    fn rejects_assistant_first() {
        let gw = Gateway::new(scripted(vec![]), "m");
        let meter = CallMeter::new(None);
        let err = gw
            .complete(None, vec![ChatMessage::system("s"), ChatMessage::assistant("a")], &meter)
            .unwrap_err();
        assert!(matches!(err, LlmError::InvalidRequest(_)));
        assert!(matches!(
            gw.complete(None, vec![], &meter).unwrap_err(),
            LlmError::InvalidRequest(_)
        ));
    }
}
