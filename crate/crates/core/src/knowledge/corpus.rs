//! Text retrieval: a BM25 scorer over a local corpus directory, and a
//! client for an external retrieval endpoint.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use super::{Passage, Retriever, RetrieverUnavailable, SourceId};
use crate::text::strip_punctuation;

const K1: f64 = 1.2;
const B: f64 = 0.75;

#[derive(Debug, Clone, Deserialize)]
pub struct Document {
    pub title: String,
    pub text: String,
}

fn terms(s: &str) -> Vec<String> {
    strip_punctuation(&s.to_lowercase())
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// In-memory BM25 index. When fewer than `k` passages match the query,
/// the remainder is filled with unmatched passages in corpus order, so the
/// result size is `min(k, corpus size)`.
#[derive(Debug, Default)]
pub struct LocalCorpus {
    docs: Vec<Document>,
    term_freqs: Vec<HashMap<String, u32>>,
    lengths: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

impl LocalCorpus {
    pub fn new(docs: Vec<Document>) -> Self {
        let docs: Vec<Document> = docs.into_iter().filter(|d| !d.text.trim().is_empty()).collect();
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut lengths = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for d in &docs {
            let toks = terms(&format!("{} {}", d.title, d.text));
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &toks {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            lengths.push(toks.len());
            term_freqs.push(tf);
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        LocalCorpus {
            docs,
            term_freqs,
            lengths,
            doc_freq,
            avg_len,
        }
    }

    /// Loads every `.jsonl` (records with `title` and `text`), `.txt` and
    /// `.md` file under `dir`, in file-name order. Plain-text files are
    /// split into paragraphs at blank lines and titled by the file stem.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut docs = Vec::new();
        for path in paths {
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            let content = match ext {
                "jsonl" | "txt" | "md" => std::fs::read_to_string(&path)?,
                _ => continue,
            };
            if ext == "jsonl" {
                for (n, line) in content.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let doc: Document = serde_json::from_str(line).map_err(|e| {
                        std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("{}:{}: {e}", path.display(), n + 1),
                        )
                    })?;
                    docs.push(doc);
                }
            } else {
                let title = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("")
                    .to_owned();
                for para in content.split("\n\n") {
                    let text = para.split_whitespace().collect::<Vec<_>>().join(" ");
                    if !text.is_empty() {
                        docs.push(Document {
                            title: title.clone(),
                            text,
                        });
                    }
                }
            }
        }
        Ok(Self::new(docs))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let tf = &self.term_freqs[doc];
        let norm = K1 * (1.0 - B + B * self.lengths[doc] as f64 / self.avg_len.max(1e-9));
        terms(query)
            .iter()
            .map(|t| {
                let f = tf.get(t).copied().unwrap_or(0) as f64;
                if f == 0.0 {
                    0.0
                } else {
                    self.idf(t) * f * (K1 + 1.0) / (f + norm)
                }
            })
            .sum()
    }

    pub fn search(&self, query: &str, k: usize) -> Vec<Passage> {
        let mut scored: Vec<(usize, f64)> =
            (0..self.docs.len()).map(|i| (i, self.score(query, i))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(r, (i, score))| Passage {
                source: SourceId::Text,
                title_or_uri: self.docs[i].title.clone(),
                body: self.docs[i].text.clone(),
                score,
                rank: r + 1,
                query: query.to_owned(),
            })
            .collect()
    }
}

impl Retriever for LocalCorpus {
    fn source(&self) -> SourceId {
        SourceId::Text
    }

    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrieverUnavailable> {
        Ok(self.search(query, k))
    }
}

#[derive(Debug, Deserialize)]
struct RemoteHit {
    #[serde(default)]
    title: String,
    text: String,
    #[serde(default)]
    score: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RemoteReply {
    Hits(Vec<RemoteHit>),
    Wrapped { results: Vec<RemoteHit> },
}

/// Client for a retrieval service: `POST {"query", "k"}` answered by a
/// ranked list of `{"title", "text", "score"}` (bare or under `results`).
pub struct HttpTextRetriever {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpTextRetriever {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, RetrieverUnavailable> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrieverUnavailable::new(SourceId::Text, e))?;
        Ok(HttpTextRetriever {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl Retriever for HttpTextRetriever {
    fn source(&self) -> SourceId {
        SourceId::Text
    }

    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrieverUnavailable> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let fail = |e: &dyn std::fmt::Display| RetrieverUnavailable::new(SourceId::Text, e);
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "query": query, "k": k }))
            .send()
            .map_err(|e| fail(&e))?;
        if !resp.status().is_success() {
            return Err(fail(&format!("HTTP {}", resp.status())));
        }
        let hits = match resp.json::<RemoteReply>().map_err(|e| fail(&e))? {
            RemoteReply::Hits(h) | RemoteReply::Wrapped { results: h } => h,
        };
        Ok(hits
            .into_iter()
            .filter(|h| !h.text.trim().is_empty())
            .take(k)
            .enumerate()
            .map(|(r, h)| Passage {
                source: SourceId::Text,
                title_or_uri: h.title,
                body: h.text,
                score: h.score,
                rank: r + 1,
                query: query.to_owned(),
            })
            .collect())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::Document;

    pub fn shakira_docs() -> Vec<Document> {
        let d = |t: &str, x: &str| Document {
            title: t.into(),
            text: x.into(),
        };
        vec![
            d("Shakira", "Shakira is a Colombian singer and songwriter born in Barranquilla."),
            d("Laundry Service", "Laundry Service is the fifth studio album by Shakira, released in 2001."),
            d(
                "Shakira discography",
                "Shakira has released studio albums including Pies Descalzos, Donde Estan los Ladrones, Laundry Service, Fijacion Oral Vol. 1, Oral Fixation Vol. 2 and She Wolf.",
            ),
            d("Barranquilla", "Barranquilla is a port city on the Caribbean coast of Colombia."),
        ]
    }
}
