//! Web search through a SerpAPI-compatible endpoint, with a recording
//! directory so runs can be replayed offline.
//!
//! Recordings are keyed by the SHA-256 of the query; each file holds the
//! raw JSON response body. Results are read from `organic_results`
//! (`title`, `link`, `snippet`) and truncated to `k` on every read.

use std::path::PathBuf;
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{Passage, Retriever, RetrieverUnavailable, SourceId};

pub const DEFAULT_ENDPOINT: &str = "https://serpapi.com/search.json";
pub const DEFAULT_KEY_ENV: &str = "SERPAPI_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WebMode {
    /// Always query the endpoint.
    Live,
    /// Query the endpoint and store each response.
    Record,
    /// Serve stored responses only.
    Replay,
}

#[derive(Debug, Deserialize)]
struct SearchResponse {
    #[serde(default)]
    organic_results: Vec<OrganicResult>,
}

#[derive(Debug, Deserialize)]
struct OrganicResult {
    #[serde(default)]
    title: String,
    #[serde(default)]
    link: String,
    #[serde(default)]
    snippet: String,
}

pub struct WebRetriever {
    mode: WebMode,
    endpoint: String,
    api_key: Option<String>,
    recordings: Option<PathBuf>,
    client: reqwest::blocking::Client,
}

pub fn recording_digest(query: &str) -> String {
    hex::encode(Sha256::digest(query.as_bytes()))
}

impl WebRetriever {
    pub fn new(
        mode: WebMode,
        endpoint: impl Into<String>,
        api_key: Option<String>,
        recordings: Option<PathBuf>,
        timeout: Duration,
    ) -> Result<Self, RetrieverUnavailable> {
        if mode != WebMode::Live && recordings.is_none() {
            return Err(RetrieverUnavailable::new(
                SourceId::Web,
                "record and replay modes need a recordings directory",
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrieverUnavailable::new(SourceId::Web, e))?;
        Ok(WebRetriever {
            mode,
            endpoint: endpoint.into(),
            api_key,
            recordings,
            client,
        })
    }

    /// Replay-only retriever over `dir`.
    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        WebRetriever {
            mode: WebMode::Replay,
            endpoint: DEFAULT_ENDPOINT.into(),
            api_key: None,
            recordings: Some(dir.into()),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn recording_path(&self, query: &str) -> Option<PathBuf> {
        self.recordings
            .as_ref()
            .map(|d| d.join(format!("{}.json", recording_digest(query))))
    }

    fn fetch(&self, query: &str, k: usize) -> Result<String, RetrieverUnavailable> {
        let fail = |e: &dyn std::fmt::Display| RetrieverUnavailable::new(SourceId::Web, e);
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| fail(&"no web search API key configured"))?;
        let num = k.to_string();
        let resp = self
            .client
            .get(&self.endpoint)
            .query(&[("engine", "google"), ("q", query), ("num", &num), ("api_key", key)])
            .send()
            .map_err(|e| fail(&e))?;
        if !resp.status().is_success() {
            return Err(fail(&format!("HTTP {}", resp.status())));
        }
        resp.text().map_err(|e| fail(&e))
    }

    fn body_for(&self, query: &str, k: usize) -> Result<String, RetrieverUnavailable> {
        let path = self.recording_path(query);
        match self.mode {
            WebMode::Replay => {
                let path = path.expect("replay mode has a recordings directory");
                std::fs::read_to_string(&path).map_err(|e| {
                    RetrieverUnavailable::new(
                        SourceId::Web,
                        format!("no recording for {query:?} at {}: {e}", path.display()),
                    )
                })
            }
            WebMode::Live => self.fetch(query, k),
            WebMode::Record => {
                let body = self.fetch(query, k)?;
                let path = path.expect("record mode has a recordings directory");
                let write = || -> std::io::Result<()> {
                    let dir = path.parent().expect("recording path has a parent");
                    std::fs::create_dir_all(dir)?;
                    let tmp = tempfile::NamedTempFile::new_in(dir)?;
                    std::fs::write(tmp.path(), &body)?;
                    tmp.persist(&path).map_err(|e| e.error)?;
                    Ok(())
                };
                if let Err(e) = write() {
                    log::warn!("could not store web recording {}: {e}", path.display());
                }
                Ok(body)
            }
        }
    }
}

/// Parses a search response body into ranked passages. Results without a
/// snippet fall back to their title; results with neither are skipped.
pub fn parse_results(query: &str, body: &str, k: usize) -> Result<Vec<Passage>, RetrieverUnavailable> {
    let parsed: SearchResponse = serde_json::from_str(body)
        .map_err(|e| RetrieverUnavailable::new(SourceId::Web, format!("bad search response: {e}")))?;
    Ok(parsed
        .organic_results
        .into_iter()
        .filter_map(|r| {
            let body = if r.snippet.trim().is_empty() { r.title.clone() } else { r.snippet };
            (!body.trim().is_empty()).then_some((r.link, r.title, body))
        })
        .take(k)
        .enumerate()
        .map(|(i, (link, title, body))| Passage {
            source: SourceId::Web,
            title_or_uri: if link.is_empty() { title } else { link },
            body,
            score: 1.0 / (i + 1) as f64,
            rank: i + 1,
            query: query.to_owned(),
        })
        .collect())
}

impl Retriever for WebRetriever {
    fn source(&self) -> SourceId {
        SourceId::Web
    }

    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrieverUnavailable> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let body = self.body_for(query, k)?;
        parse_results(query, &body, k)
    }
}
