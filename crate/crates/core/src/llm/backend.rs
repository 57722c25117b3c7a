use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CacheKey, ChatBackend, ChatRequest, Completion, LlmError, ResponseCache, TemplateId, Usage};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<TemplateId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
}

/// One entry of a script file: `{"match": {...}, "response": "..."}`.
///
/// `contains` is tested against the final user turn of the request. When
/// both `template_id` and `contains` are given, both must match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub response: String,
}

impl ScriptRule {
    pub fn contains(needle: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptRule {
            matcher: ScriptMatch {
                template_id: None,
                contains: Some(needle.into()),
            },
            response: response.into(),
        }
    }

    pub fn template(id: TemplateId, response: impl Into<String>) -> Self {
        ScriptRule {
            matcher: ScriptMatch {
                template_id: Some(id),
                contains: None,
            },
            response: response.into(),
        }
    }

    pub fn template_contains(
        id: TemplateId,
        needle: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        ScriptRule {
            matcher: ScriptMatch {
                template_id: Some(id),
                contains: Some(needle.into()),
            },
            response: response.into(),
        }
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        if let Some(id) = self.matcher.template_id {
            if request.template != Some(id) {
                return false;
            }
        }
        match &self.matcher.contains {
            Some(needle) => request.last_user().contains(needle.as_str()),
            None => self.matcher.template_id.is_some(),
        }
    }
}

/// Canned responses chosen by the first rule that matches.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    invocations: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        ScriptedBackend {
            rules,
            invocations: AtomicUsize::new(0),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Backend(format!("reading script {}: {e}", path.display())))?;
        let rules: Vec<ScriptRule> = serde_json::from_str(&text)
            .map_err(|e| LlmError::Backend(format!("parsing script {}: {e}", path.display())))?;
        Ok(Self::new(rules))
    }

    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        self.invocations.fetch_add(1, Ordering::SeqCst);
        match self.rules.iter().find(|r| r.matches(request)) {
            Some(rule) => Ok(Completion {
                text: rule.response.clone(),
                usage: Usage::default(),
            }),
            None => Err(LlmError::ScriptGap {
                digest: CacheKey::new(self.id(), request).digest().to_owned(),
                preview: request.last_user().chars().take(120).collect(),
            }),
        }
    }
}

pub const HTTP_BACKEND_ID: &str = "http";

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "https://api.openai.com/v1".into(),
            api_key: None,
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

/// Chat-completions over HTTP (`POST {base}/chat/completions`).
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Backend(e.to_string()))?;
        Ok(HttpBackend { config, client })
    }

    fn attempt(&self, request: &ChatRequest) -> Result<Completion, (bool, String)> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        let mut builder = self.client.post(url).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let transient = status.is_server_error() || status.as_u16() == 429;
            let text = resp.text().unwrap_or_default();
            return Err((transient, format!("HTTP {status}: {text}")));
        }
        let value: serde_json::Value = resp.json().map_err(|e| (false, e.to_string()))?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or((false, "response has no choices[0].message.content".to_owned()))?
            .to_owned();
        let usage = Usage {
            prompt_tokens: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(Completion { text, usage })
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        HTTP_BACKEND_ID
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let mut backoff = self.config.initial_backoff;
        let attempts = self.config.attempts.max(1);
        let mut last = String::new();
        for n in 1..=attempts {
            match self.attempt(request) {
                Ok(c) => return Ok(c),
                Err((transient, msg)) => {
                    log::warn!("chat completion attempt {n}/{attempts} failed: {msg}");
                    last = msg;
                    if !transient || n == attempts {
                        break;
                    }
                    thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
        Err(LlmError::Backend(last))
    }
}

/// Replays responses previously recorded by a cached HTTP backend; never
/// touches the network.
pub struct RecordedBackend {
    cache: ResponseCache,
}

impl RecordedBackend {
    pub fn new(cache: ResponseCache) -> Self {
        RecordedBackend { cache }
    }
}

impl ChatBackend for RecordedBackend {
    fn id(&self) -> &str {
        HTTP_BACKEND_ID
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let key = CacheKey::new(HTTP_BACKEND_ID, request);
        match self.cache.get(&key)? {
            Some(hit) => Ok(Completion {
                text: hit.response,
                usage: hit.usage,
            }),
            None => Err(LlmError::Backend(format!(
                "no recording for request {}",
                key.digest()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::ChatMessage;
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn req(template: Option<TemplateId>, text: &str) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::system("sys mentions apples"), ChatMessage::user(text)],
            temperature: 0.0,
            template,
        }
    }

    #[test]
    fn empty_script_is_a_gap() {
        let b = ScriptedBackend::new(vec![]);
        assert!(matches!(
            b.complete(&req(None, "anything")),
            Err(LlmError::ScriptGap { .. })
        ));
    }

    #[test]
    fn first_declared_rule_wins() {
        let b = ScriptedBackend::new(vec![
            ScriptRule::contains("Shakira", "first"),
            ScriptRule::contains("Shakira albums", "second"),
        ]);
        assert_eq!(b.complete(&req(None, "Shakira albums")).unwrap().text, "first");
    }

    #[test]
    fn matches_on_last_user_turn_and_template() {
        let b = ScriptedBackend::new(vec![
            ScriptRule::template(TemplateId::ChildAnswer, "child"),
            ScriptRule::contains("apples", "apples"),
        ]);
        assert_eq!(
            b.complete(&req(Some(TemplateId::ChildAnswer), "x")).unwrap().text,
            "child"
        );
        // the system message mentions apples but matching looks at the user turn
        assert!(b.complete(&req(Some(TemplateId::SiblingAnswer), "x")).is_err());
    }

    #[test]
    fn parses_script_file_format() {
        let text = r#"[{"match": {"template_id": "executor_search", "contains": "Paris"}, "response": "[\"Paris\"]"},
                       {"match": {"contains": "x"}, "response": "y"}]"#;
        let rules: Vec<ScriptRule> = serde_json::from_str(text).unwrap();
        assert_eq!(rules[0].matcher.template_id, Some(TemplateId::ExecutorSearch));
        assert_eq!(rules[1].response, "y");
    }

    /// Serves the given (status, body) responses, one per connection.
    fn serve(responses: Vec<(u16, &'static str)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn http_backend_retries_transient_failures() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":7,"completion_tokens":2}}"#;
        let (url, handle) = serve(vec![(503, "{}"), (200, ok)]);
        let backend = HttpBackend::new(HttpBackendConfig {
            base_url: url,
            api_key: Some("k".into()),
            initial_backoff: Duration::from_millis(1),
            ..Default::default()
        })
        .unwrap();
        let out = backend.complete(&req(None, "hello")).unwrap();
        assert_eq!(out.text, "hi");
        assert_eq!(out.usage.prompt_tokens, 7);
        let bodies = handle.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["messages"][1]["role"], "user");
        assert_eq!(sent["model"], "m");
    }

    #[test]
    fn http_backend_gives_up_on_client_errors() {
        let (url, handle) = serve(vec![(400, r#"{"error":"bad"}"#)]);
        let backend = HttpBackend::new(HttpBackendConfig {
            base_url: url,
            initial_backoff: Duration::from_millis(1),
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(backend.complete(&req(None, "x")), Err(LlmError::Backend(_))));
        handle.join().unwrap();
    }

    #[test]
    fn recorded_backend_replays_only() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let r = req(None, "q");
        cache
            .put(
                &CacheKey::new(HTTP_BACKEND_ID, &r),
                &super::super::CachedResponse {
                    response: "recorded".into(),
                    usage: Usage::default(),
                },
            )
            .unwrap();
        let b = RecordedBackend::new(cache);
        assert_eq!(b.complete(&r).unwrap().text, "recorded");
        assert!(b.complete(&req(None, "other")).is_err());
    }
}
