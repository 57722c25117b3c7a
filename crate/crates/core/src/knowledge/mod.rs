//! Knowledge sources (KG, text corpus, web search), per-question source
//! selection and multi-source retrieval with a fixed merge order.

pub mod corpus;
pub mod kg;
pub mod predicate;
pub mod program;
pub mod web;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{HttpTextRetriever, LocalCorpus};
pub use kg::{AttrValue, Attribute, Entity, KgError, KgStats, KgStore, Triple};
pub use predicate::{Comparison, Predicate, PredicateParseError};
pub use program::{parse_program, query_kg, KgQueryError, ProgramParseError};
pub use web::{WebMode, WebRetriever};

use crate::llm::{CallMeter, Gateway, TemplateId, Vars};
use crate::plan::ResolvedOperator;

/// Declaration order is the merge order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceId {
    Kg,
    Text,
    Web,
}

impl SourceId {
    pub const ALL: [SourceId; 3] = [SourceId::Kg, SourceId::Text, SourceId::Web];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceId::Kg => "kg",
            SourceId::Text => "text",
            SourceId::Web => "web",
        }
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown knowledge source `{0}` (expected kg, text or web)")]
pub struct UnknownSource(pub String);

impl FromStr for SourceId {
    type Err = UnknownSource;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kg" => Ok(SourceId::Kg),
            "text" => Ok(SourceId::Text),
            "web" => Ok(SourceId::Web),
            _ => Err(UnknownSource(s.to_owned())),
        }
    }
}

/// Parses a comma-separated source list such as `kg,text`.
pub fn parse_sources(list: &str) -> Result<BTreeSet<SourceId>, UnknownSource> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

pub fn join_sources(sources: &BTreeSet<SourceId>) -> String {
    sources
        .iter()
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub source: SourceId,
    pub title_or_uri: String,
    pub body: String,
    pub score: f64,
    /// 1-based within (source, query).
    pub rank: usize,
    pub query: String,
}

impl Passage {
    pub fn id(&self) -> String {
        format!("{}:{}#{}", self.source, self.title_or_uri, self.rank)
    }
}

#[derive(Debug, Error)]
#[error("{origin} retriever unavailable: {message}")]
pub struct RetrieverUnavailable {
    pub origin: SourceId,
    pub message: String,
}

impl RetrieverUnavailable {
    pub fn new(source: SourceId, message: impl fmt::Display) -> Self {
        RetrieverUnavailable {
            origin: source,
            message: message.to_string(),
        }
    }
}

/// A passage retriever for the text or web source.
pub trait Retriever: Send + Sync {
    fn source(&self) -> SourceId;
    /// At most `k` passages ranked from 1.
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrieverUnavailable>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source: Option<SourceId>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBundle {
    pub query_per_source: BTreeMap<SourceId, String>,
    /// Merged: kg, text, web, then rank.
    pub passages: Vec<Passage>,
    pub kg_answer: Option<String>,
    pub failures: Vec<SourceFailure>,
    /// Program-emitting LLM calls made on the KG path.
    pub kg_llm_calls: usize,
}

impl RetrievalBundle {
    pub fn is_empty(&self) -> bool {
        self.passages.is_empty() && self.kg_answer.as_deref().is_none_or(str::is_empty)
    }

    /// Prompt-ready knowledge block, one line per item.
    pub fn render(&self) -> String {
        let mut lines = Vec::new();
        if let Some(a) = self.kg_answer.as_deref().filter(|a| !a.is_empty()) {
            lines.push(format!("[kg] {a}"));
        }
        for p in &self.passages {
            lines.push(format!("[{}] {}: {}", p.source, p.title_or_uri, p.body));
        }
        lines.join("\n")
    }

    /// Plain concatenation used by the Filter gate.
    pub fn concatenated(&self) -> String {
        let mut parts = Vec::new();
        if let Some(a) = self.kg_answer.as_deref().filter(|a| !a.is_empty()) {
            parts.push(a.to_owned());
        }
        for p in &self.passages {
            parts.push(format!("{} {}", p.title_or_uri, p.body));
        }
        parts.join("\n")
    }

    pub fn evidence(&self) -> Vec<String> {
        let mut ids = Vec::new();
        if self.kg_answer.as_deref().is_some_and(|a| !a.is_empty()) {
            ids.push("kg:answer".to_owned());
        }
        ids.extend(self.passages.iter().map(Passage::id));
        ids
    }
}

#[derive(Debug, Error)]
#[error("every selected source failed: {}", describe(.0))]
pub struct AllSourcesFailed(pub Vec<SourceFailure>);

fn describe(failures: &[SourceFailure]) -> String {
    failures
        .iter()
        .map(|f| match f.source {
            Some(s) => format!("{s}: {}", f.message),
            None => f.message.clone(),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// What one retrieval is about: the formulated query for text and web, and
/// the sub-question plus resolved operator for the KG.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalRequest<'a> {
    pub subquestion: &'a str,
    pub query: &'a str,
    pub operator: Option<&'a ResolvedOperator>,
}

/// The configured sources. Shared immutably across questions.
#[derive(Clone, Default)]
pub struct KnowledgeHub {
    pub kg: Option<Arc<KgStore>>,
    pub text: Option<Arc<dyn Retriever>>,
    pub web: Option<Arc<dyn Retriever>>,
}

impl fmt::Debug for KnowledgeHub {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeHub")
            .field("sources", &self.configured())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub sources: BTreeSet<SourceId>,
    /// Whether an LLM call was made.
    pub called: bool,
    /// Whether the reply was unusable and all sources were taken.
    pub fell_back: bool,
}

impl KnowledgeHub {
    pub fn with_kg(mut self, store: Arc<KgStore>) -> Self {
        self.kg = Some(store);
        self
    }

    pub fn with_text(mut self, r: Arc<dyn Retriever>) -> Self {
        self.text = Some(r);
        self
    }

    pub fn with_web(mut self, r: Arc<dyn Retriever>) -> Self {
        self.web = Some(r);
        self
    }

    pub fn configured(&self) -> BTreeSet<SourceId> {
        let mut out = BTreeSet::new();
        if self.kg.is_some() {
            out.insert(SourceId::Kg);
        }
        if self.text.is_some() {
            out.insert(SourceId::Text);
        }
        if self.web.is_some() {
            out.insert(SourceId::Web);
        }
        out
    }

    /// Picks the sources to consult for `subquestion`. A single configured
    /// source is returned without asking the LLM; an unusable reply or a
    /// failed call falls back to every configured source.
    pub fn select_sources(&self, subquestion: &str, llm: &Gateway, meter: &CallMeter) -> Selection {
        let configured = self.configured();
        if configured.len() <= 1 {
            return Selection {
                sources: configured,
                called: false,
                fell_back: false,
            };
        }
        let vars = Vars::from([
            ("question", subquestion.to_owned()),
            ("sources", join_sources(&configured)),
        ]);
        let picked = match llm.ask(TemplateId::SourceSelection, &vars, meter) {
            Ok(reply) => parse_selection(&reply.text, &configured),
            Err(e) => {
                log::warn!("source selection failed: {e}");
                BTreeSet::new()
            }
        };
        let fell_back = picked.is_empty();
        Selection {
            sources: if fell_back { configured } else { picked },
            called: true,
            fell_back,
        }
    }

    /// Queries every source in `sources` for `request`. A failing source is
    /// recorded and skipped; only when all of them fail is it an error.
    pub fn retrieve(
        &self,
        sources: &BTreeSet<SourceId>,
        request: RetrievalRequest<'_>,
        k: usize,
        llm: &Gateway,
        meter: &CallMeter,
    ) -> Result<RetrievalBundle, Box<(RetrievalBundle, AllSourcesFailed)>> {
        let mut bundle = RetrievalBundle::default();
        let mut attempted = 0;
        for &source in sources {
            attempted += 1;
            match source {
                SourceId::Kg => {
                    bundle
                        .query_per_source
                        .insert(source, request.subquestion.to_owned());
                    let Some(store) = &self.kg else {
                        bundle.failures.push(not_configured(source));
                        continue;
                    };
                    let out = query_kg(store, request.subquestion, request.operator, llm, meter);
                    bundle.kg_llm_calls += out.llm_calls;
                    match out.result {
                        Ok(answer) => bundle.kg_answer = Some(answer),
                        Err(e) => bundle.failures.push(SourceFailure {
                            source: Some(source),
                            message: e.to_string(),
                        }),
                    }
                }
                SourceId::Text | SourceId::Web => {
                    bundle
                        .query_per_source
                        .insert(source, request.query.to_owned());
                    let retriever = if source == SourceId::Text { &self.text } else { &self.web };
                    let Some(r) = retriever else {
                        bundle.failures.push(not_configured(source));
                        continue;
                    };
                    match r.retrieve(request.query, k) {
                        Ok(mut passages) => {
                            passages.truncate(k);
                            bundle.passages.extend(passages)
                        }
                        Err(e) => {
                            log::warn!("{e}");
                            bundle.failures.push(SourceFailure {
                                source: Some(source),
                                message: e.message,
                            })
                        }
                    }
                }
            }
        }
        bundle
            .passages
            .sort_by(|a, b| a.source.cmp(&b.source).then(a.rank.cmp(&b.rank)));
        if attempted > 0 && bundle.failures.len() == attempted {
            let failures = bundle.failures.clone();
            return Err(Box::new((bundle, AllSourcesFailed(failures))));
        }
        if attempted == 0 {
            let failure = SourceFailure {
                source: None,
                message: "no source selected".into(),
            };
            bundle.failures.push(failure.clone());
            return Err(Box::new((bundle, AllSourcesFailed(vec![failure]))));
        }
        Ok(bundle)
    }
}

fn not_configured(source: SourceId) -> SourceFailure {
    SourceFailure {
        source: Some(source),
        message: "not configured".into(),
    }
}

/// Source names mentioned in `reply`, restricted to `configured`.
pub fn parse_selection(reply: &str, configured: &BTreeSet<SourceId>) -> BTreeSet<SourceId> {
    reply
        .to_ascii_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter_map(|w| w.parse::<SourceId>().ok())
        .filter(|s| configured.contains(s))
        .collect()
}
