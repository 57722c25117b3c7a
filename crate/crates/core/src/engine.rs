//! Tree execution: nodes are evaluated children-first. Operator leaves
//! select sources, retrieve and run the operator executor, falling back to
//! direct retrieval-augmented answering when the executor fails. Inner
//! nodes synthesize from their children (or, for direct-reasoning leaves,
//! from earlier siblings), and an Unknown synthesis at an inner node also
//! falls back to direct answering.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{KnowledgeHub, RetrievalBundle, RetrievalRequest, SourceId};
use crate::llm::reply::parse_answer;
use crate::llm::{CallMeter, Gateway, LlmError, MeterSnapshot, TemplateId, Vars};
use crate::operators::{
    execute_operator, filter_gate, queries_for, EntityRef, ExecutionError, ExecutorKnowledge,
    GateCandidate, GateOutcome, OverlapGate,
};
use crate::plan::{
    parse_art, post_order, substitute_text, validate_art, Answer, Art, NodeKind, PlanDocument,
    PlanError, ResolvedOperator, Violation,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Passages per source and query.
    pub k: usize,
    pub gate: OverlapGate,
    /// LLM calls per question, planning included.
    pub max_llm_calls: Option<usize>,
    /// Retriever calls per question, counted per (source, query).
    pub max_retrievals: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            k: 3,
            gate: OverlapGate::default(),
            max_llm_calls: None,
            max_retrievals: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Operator,
    Sibling,
    Child,
    DirectRag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeOutcome {
    pub index: usize,
    /// The sub-question with placeholders substituted.
    pub question: String,
    pub answer: Answer,
    pub method: Method,
    pub sources: BTreeSet<SourceId>,
    pub evidence: Vec<String>,
    pub failed_operator: bool,
    /// Answered without evidence or after an LLM error.
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub llm_calls: usize,
    pub retriever_calls: BTreeMap<SourceId, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateOutcome>,
}

impl NodeOutcome {
    fn new(index: usize, question: String) -> Self {
        NodeOutcome {
            index,
            question,
            answer: Answer::unknown(),
            method: Method::Operator,
            sources: BTreeSet::new(),
            evidence: Vec::new(),
            failed_operator: false,
            degraded: false,
            notes: Vec::new(),
            llm_calls: 0,
            retriever_calls: BTreeMap::new(),
            gate: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Every logical LLM call: planning, selection, reasoning and KG
    /// program generation.
    pub llm_calls: usize,
    pub planning_calls: usize,
    pub selection_calls: usize,
    /// Executor, child, sibling and direct-answer calls.
    pub reasoning_calls: usize,
    pub kg_program_calls: usize,
    pub retriever_calls: BTreeMap<SourceId, usize>,
    pub operator_fallbacks: usize,
    pub parent_fallbacks: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
}

impl Counters {
    pub fn total_retriever_calls(&self) -> usize {
        self.retriever_calls.values().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    /// Indexed by node.
    pub outcomes: Vec<NodeOutcome>,
    /// Evaluation order.
    pub order: Vec<usize>,
    pub counters: Counters,
    pub elapsed_ms: u64,
}

#[derive(Debug, Error)]
pub enum PlanFailure {
    #[error("planning call failed: {0}")]
    Llm(#[from] LlmError),
    #[error("planner produced an invalid plan after one repair: {error}")]
    Invalid { error: PlanError, reply: String },
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Plan(#[from] PlanFailure),
    #[error("plan is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidPlan(Vec<Violation>),
    #[error("node {node}: no source answered and the LLM failed: {message}")]
    Abort { node: usize, message: String },
}

/// Per-question JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub plan: Option<PlanDocument>,
    pub outcomes: Vec<NodeOutcome>,
    pub counters: Counters,
    pub final_answer: Option<Answer>,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    /// The text scored against gold answers; empty when the run failed.
    pub fn prediction(&self) -> String {
        self.final_answer.as_ref().map(Answer::to_text).unwrap_or_default()
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }

    /// Writes the record to `dir/<name>.json` atomically.
    pub fn write(&self, dir: &Path, name: &str) -> std::io::Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{name}.json"));
        let tmp = tempfile::NamedTempFile::new_in(dir)?;
        std::fs::write(tmp.path(), serde_json::to_string_pretty(self)?)?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(Into::into)
    }
}

pub struct Engine {
    hub: KnowledgeHub,
    llm: Arc<Gateway>,
    config: EngineConfig,
}

/// Takes the JSON object out of a reply that may wrap it in prose or a
/// code fence.
fn extract_object(reply: &str) -> &str {
    match (reply.find('{'), reply.rfind('}')) {
        (Some(a), Some(b)) if a < b => &reply[a..=b],
        _ => reply,
    }
}

struct Retrieved {
    bundles: Vec<RetrievalBundle>,
    all_failed: bool,
}

impl Retrieved {
    fn render(&self) -> String {
        self.bundles
            .iter()
            .map(RetrievalBundle::render)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn evidence(&self) -> Vec<String> {
        self.bundles.iter().flat_map(RetrievalBundle::evidence).collect()
    }
}

struct Run<'a> {
    engine: &'a Engine,
    meter: &'a CallMeter,
    answers: BTreeMap<usize, Answer>,
    counters: Counters,
}

impl Engine {
    pub fn new(hub: KnowledgeHub, llm: Arc<Gateway>, config: EngineConfig) -> Self {
        Engine { hub, llm, config }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn hub(&self) -> &KnowledgeHub {
        &self.hub
    }

    pub fn gateway(&self) -> &Gateway {
        &self.llm
    }

    pub fn new_meter(&self) -> CallMeter {
        CallMeter::new(self.config.max_llm_calls)
    }

    /// Asks the planner for a tree; one repair round on an invalid reply.
    /// Returns the tree and the number of LLM calls made.
    pub fn plan(&self, question: &str, meter: &CallMeter) -> Result<(Art, usize), PlanFailure> {
        let vars = Vars::from([("question", question.to_owned())]);
        let reply = self.llm.ask(TemplateId::PlanGeneration, &vars, meter)?;
        let error = match parse_art(extract_object(&reply.text)) {
            Ok(art) => return Ok((art, 1)),
            Err(e) => e,
        };
        log::info!("plan rejected ({error}); asking for a repair");
        let vars = Vars::from([
            ("question", question.to_owned()),
            ("previous", reply.text.clone()),
            ("error", error.to_string()),
        ]);
        let repaired = self.llm.ask(TemplateId::PlanRepair, &vars, meter)?;
        parse_art(extract_object(&repaired.text))
            .map(|art| (art, 2))
            .map_err(|error| PlanFailure::Invalid {
                error,
                reply: repaired.text,
            })
    }

    /// Evaluates `art` and returns the root's answer with the trace.
    pub fn execute(&self, art: &Art, meter: &CallMeter) -> Result<(Answer, RunTrace), EngineError> {
        let violations = validate_art(art);
        if !violations.is_empty() {
            return Err(EngineError::InvalidPlan(violations));
        }
        let started = Instant::now();
        let before = meter.snapshot();
        let mut run = Run {
            engine: self,
            meter,
            answers: BTreeMap::new(),
            counters: Counters::default(),
        };
        let order = post_order(art);
        let mut slots: Vec<Option<NodeOutcome>> = vec![None; art.len()];
        for &i in &order {
            let outcome = run.node(art, i, &slots)?;
            run.answers.insert(i, outcome.answer.clone());
            slots[i] = Some(outcome);
        }
        let outcomes: Vec<NodeOutcome> = slots
            .into_iter()
            .map(|o| o.expect("post-order visits every node"))
            .collect();
        let mut counters = run.counters;
        let after = meter.snapshot();
        counters.backend_calls = after.backend_calls - before.backend_calls;
        counters.cache_hits = after.cache_hits - before.cache_hits;
        counters.llm_calls = counters.selection_calls + counters.reasoning_calls + counters.kg_program_calls;
        let answer = outcomes[0].answer.clone();
        Ok((
            answer,
            RunTrace {
                outcomes,
                order,
                counters,
                elapsed_ms: started.elapsed().as_millis() as u64,
            },
        ))
    }

    /// Plans and executes `question`. Failures are recorded in the
    /// returned record rather than raised.
    pub fn answer(&self, question: &str) -> RunRecord {
        let meter = self.new_meter();
        let started = Instant::now();
        let mut record = RunRecord {
            id: None,
            question: question.to_owned(),
            plan: None,
            outcomes: Vec::new(),
            counters: Counters::default(),
            final_answer: None,
            elapsed_ms: 0,
            error: None,
        };
        match self.plan(question, &meter) {
            Err(e) => {
                record.counters.planning_calls = meter.calls();
                record.counters.llm_calls = meter.calls();
                record.error = Some(EngineError::from(e).to_string());
            }
            Ok((art, planning_calls)) => {
                record.plan = Some(PlanDocument::from_art(&art));
                self.fill(&mut record, &art, &meter, planning_calls);
            }
        }
        let snap: MeterSnapshot = meter.snapshot();
        record.counters.backend_calls = snap.backend_calls;
        record.counters.cache_hits = snap.cache_hits;
        record.elapsed_ms = started.elapsed().as_millis() as u64;
        record
    }

    /// Executes a stored plan into a record.
    pub fn answer_with_plan(&self, art: &Art) -> RunRecord {
        let meter = self.new_meter();
        let started = Instant::now();
        let mut record = RunRecord {
            id: None,
            question: art.source_question.clone(),
            plan: Some(PlanDocument::from_art(art)),
            outcomes: Vec::new(),
            counters: Counters::default(),
            final_answer: None,
            elapsed_ms: 0,
            error: None,
        };
        self.fill(&mut record, art, &meter, 0);
        let snap = meter.snapshot();
        record.counters.backend_calls = snap.backend_calls;
        record.counters.cache_hits = snap.cache_hits;
        record.elapsed_ms = started.elapsed().as_millis() as u64;
        record
    }

    fn fill(&self, record: &mut RunRecord, art: &Art, meter: &CallMeter, planning_calls: usize) {
        match self.execute(art, meter) {
            Ok((answer, trace)) => {
                record.final_answer = Some(answer);
                record.outcomes = trace.outcomes;
                record.counters = trace.counters;
            }
            Err(e) => {
                record.counters.llm_calls = meter.calls() - planning_calls;
                record.error = Some(e.to_string());
            }
        }
        record.counters.planning_calls = planning_calls;
        record.counters.llm_calls += planning_calls;
    }
}

impl Run<'_> {
    fn node(&mut self, art: &Art, i: usize, done: &[Option<NodeOutcome>]) -> Result<NodeOutcome, EngineError> {
        let node = &art.nodes[i];
        let question = substitute_text(&node.question, &self.answers).unwrap_or_else(|e| {
            log::warn!("node {i}: {e}");
            node.question.clone()
        });
        let mut out = NodeOutcome::new(i, question);
        match node.kind {
            NodeKind::Atomic => self.leaf(art, i, &mut out)?,
            NodeKind::DirectReasoning => self.sibling(art, i, done, &mut out),
            NodeKind::Root | NodeKind::Composite => self.parent(art, i, done, &mut out)?,
        }
        Ok(out)
    }

    fn llm(&self) -> &Gateway {
        &self.engine.llm
    }

    fn reasoning_call(&mut self, out: &mut NodeOutcome, template: TemplateId, vars: &Vars) -> Result<String, LlmError> {
        let result = self.llm().ask(template, vars, self.meter);
        if !matches!(result, Err(LlmError::BudgetExceeded { .. })) {
            self.counters.reasoning_calls += 1;
            out.llm_calls += 1;
        }
        result.map(|c| c.text)
    }

    fn select(&mut self, out: &mut NodeOutcome, question: &str) -> BTreeSet<SourceId> {
        let sel = self.engine.hub.select_sources(question, self.llm(), self.meter);
        if sel.called {
            self.counters.selection_calls += 1;
            out.llm_calls += 1;
        }
        if sel.fell_back {
            out.notes.push("source selection fell back to all sources".into());
        }
        out.sources.extend(sel.sources.iter().copied());
        sel.sources
    }

    /// One retrieval; counts one call per selected source.
    fn retrieve(
        &mut self,
        out: &mut NodeOutcome,
        sources: &BTreeSet<SourceId>,
        request: RetrievalRequest<'_>,
    ) -> Option<RetrievalBundle> {
        if let Some(limit) = self.engine.config.max_retrievals {
            if self.counters.total_retriever_calls() + sources.len() > limit {
                out.notes.push(format!("retrieval budget of {limit} exceeded"));
                return None;
            }
        }
        for &s in sources {
            *self.counters.retriever_calls.entry(s).or_default() += 1;
            *out.retriever_calls.entry(s).or_default() += 1;
        }
        let result = self.engine.hub.retrieve(
            sources,
            request,
            self.engine.config.k,
            self.llm(),
            self.meter,
        );
        let bundle = match result {
            Ok(b) => Some(b),
            Err(failed) => {
                let (b, e) = *failed;
                out.notes.push(e.to_string());
                self.count_kg_calls(out, &b);
                return None;
            }
        };
        if let Some(b) = &bundle {
            self.count_kg_calls(out, b);
            for f in &b.failures {
                out.notes.push(format!(
                    "{}: {}",
                    f.source.map_or("retrieval", |s| s.as_str()),
                    f.message
                ));
            }
        }
        bundle
    }

    fn count_kg_calls(&mut self, out: &mut NodeOutcome, b: &RetrievalBundle) {
        self.counters.kg_program_calls += b.kg_llm_calls;
        out.llm_calls += b.kg_llm_calls;
    }

    fn leaf(&mut self, art: &Art, i: usize, out: &mut NodeOutcome) -> Result<(), EngineError> {
        let spec = art.nodes[i].operator.as_ref().expect("validated atomic node has an operator");
        let question = out.question.clone();
        let resolved = match spec.resolve(&self.answers) {
            Ok(r) => r,
            Err(e) => {
                out.notes.push(format!("operator arguments: {e}"));
                return self.fallback_from_leaf(out, &question, None);
            }
        };
        let sources = self.select(out, &question);
        let attempt = match &resolved {
            ResolvedOperator::Filter {
                entities,
                condition,
            } => self.filter_leaf(out, &sources, entities, condition),
            _ => {
                let query = queries_for(&resolved).remove(0);
                let request = RetrievalRequest {
                    subquestion: &question,
                    query: &query,
                    operator: Some(&resolved),
                };
                let bundle = self.retrieve(out, &sources, request);
                let retrieved = Retrieved {
                    all_failed: bundle.is_none(),
                    bundles: bundle.into_iter().collect(),
                };
                let knowledge = ExecutorKnowledge {
                    text: retrieved.render(),
                    evidence: retrieved.evidence(),
                };
                LeafAttempt::Execute(knowledge, retrieved, None)
            }
        };
        let (knowledge, retrieved, narrowed) = match attempt {
            LeafAttempt::Done(answer) => {
                out.answer = answer;
                out.method = Method::Operator;
                return Ok(());
            }
            LeafAttempt::Execute(k, r, narrowed) => (k, r, narrowed),
        };
        if knowledge.text.trim().is_empty() {
            out.notes.push("no knowledge for the operator executor".into());
            return self.fallback_from_leaf(out, &question, Some(retrieved));
        }
        let op = narrowed.as_ref().unwrap_or(&resolved);
        let result = execute_operator(op, &question, &knowledge, self.llm(), self.meter);
        if !matches!(result, Err(ExecutionError::Llm(LlmError::BudgetExceeded { .. }))) {
            self.counters.reasoning_calls += 1;
            out.llm_calls += 1;
        }
        match result {
            Ok(local) => {
                out.answer = local.value.to_answer();
                out.evidence = local.evidence;
                out.method = Method::Operator;
                Ok(())
            }
            Err(e) => {
                out.notes.push(e.to_string());
                self.fallback_from_leaf(out, &question, Some(retrieved))
            }
        }
    }

    fn filter_leaf(
        &mut self,
        out: &mut NodeOutcome,
        sources: &BTreeSet<SourceId>,
        entities: &[String],
        condition: &str,
    ) -> LeafAttempt {
        let mut candidates = Vec::with_capacity(entities.len());
        let mut bundles = Vec::with_capacity(entities.len());
        let mut failed = 0;
        for entity in entities {
            let query = format!("{entity} {condition}");
            let op = ResolvedOperator::Filter {
                entities: vec![entity.clone()],
                condition: condition.to_owned(),
            };
            let request = RetrievalRequest {
                subquestion: &query,
                query: &query,
                operator: Some(&op),
            };
            let bundle = self.retrieve(out, sources, request);
            if bundle.is_none() {
                failed += 1;
            }
            let bundle = bundle.unwrap_or_default();
            candidates.push(GateCandidate {
                entity: EntityRef::named(entity.clone()),
                query,
                passage: bundle.concatenated(),
            });
            bundles.push(bundle);
        }
        if entities.is_empty() {
            return LeafAttempt::Done(Answer::List(Vec::new()));
        }
        if failed == entities.len() {
            return LeafAttempt::Execute(
                ExecutorKnowledge::default(),
                Retrieved {
                    bundles,
                    all_failed: true,
                },
                None,
            );
        }
        let gate = match filter_gate(&candidates, self.engine.config.gate) {
            Ok(g) => g,
            Err(e) => {
                out.notes.push(e.to_string());
                return LeafAttempt::Execute(
                    ExecutorKnowledge::default(),
                    Retrieved {
                        bundles,
                        all_failed: false,
                    },
                    None,
                );
            }
        };
        let survivors = gate.survivors.clone();
        out.gate = Some(gate);
        if survivors.is_empty() {
            return LeafAttempt::Done(Answer::List(Vec::new()));
        }
        let mut text = Vec::new();
        let mut evidence = Vec::new();
        for &s in &survivors {
            text.push(format!("## {}\n{}", entities[s], bundles[s].render()));
            evidence.extend(bundles[s].evidence());
        }
        let kept: Vec<RetrievalBundle> = survivors.iter().map(|&s| bundles[s].clone()).collect();
        let narrowed = ResolvedOperator::Filter {
            entities: survivors.iter().map(|&s| entities[s].clone()).collect(),
            condition: condition.to_owned(),
        };
        LeafAttempt::Execute(
            ExecutorKnowledge {
                text: text.join("\n"),
                evidence,
            },
            Retrieved {
                bundles: kept,
                all_failed: false,
            },
            Some(narrowed),
        )
    }

    fn fallback_from_leaf(
        &mut self,
        out: &mut NodeOutcome,
        question: &str,
        retrieved: Option<Retrieved>,
    ) -> Result<(), EngineError> {
        self.counters.operator_fallbacks += 1;
        out.failed_operator = true;
        self.direct_rag(out, question, retrieved)
    }

    /// Answers `question` from retrieved knowledge. Reuses `retrieved` when
    /// given, otherwise selects sources and retrieves for the question.
    fn direct_rag(
        &mut self,
        out: &mut NodeOutcome,
        question: &str,
        retrieved: Option<Retrieved>,
    ) -> Result<(), EngineError> {
        out.method = Method::DirectRag;
        let retrieved = match retrieved {
            Some(r) => r,
            None => {
                let sources = self.select(out, question);
                let request = RetrievalRequest {
                    subquestion: question,
                    query: question,
                    operator: None,
                };
                let bundle = self.retrieve(out, &sources, request);
                Retrieved {
                    all_failed: bundle.is_none(),
                    bundles: bundle.into_iter().collect(),
                }
            }
        };
        let mut knowledge = retrieved.render();
        if knowledge.trim().is_empty() {
            out.degraded = true;
            out.notes.push("answered without evidence".into());
            knowledge = "(nothing retrieved)".into();
        }
        out.evidence = retrieved.evidence();
        let vars = Vars::from([("question", question.to_owned()), ("knowledge", knowledge)]);
        match self.reasoning_call(out, TemplateId::DirectRag, &vars) {
            Ok(text) => {
                out.answer = parse_answer(&text);
                Ok(())
            }
            Err(e) if retrieved.all_failed && !matches!(e, LlmError::BudgetExceeded { .. }) => {
                Err(EngineError::Abort {
                    node: out.index,
                    message: e.to_string(),
                })
            }
            Err(e) => {
                out.degraded = true;
                out.notes.push(e.to_string());
                out.answer = Answer::unknown();
                Ok(())
            }
        }
    }

    fn pairs(&self, indices: &[usize], done: &[Option<NodeOutcome>]) -> String {
        indices
            .iter()
            .filter_map(|&c| done[c].as_ref())
            .map(|o| format!("Q: {}\nA: {}", o.question, o.answer.to_text()))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn parent(&mut self, art: &Art, i: usize, done: &[Option<NodeOutcome>], out: &mut NodeOutcome) -> Result<(), EngineError> {
        out.method = Method::Child;
        let vars = Vars::from([
            ("question", out.question.clone()),
            ("pairs", self.pairs(&art.nodes[i].children, done)),
        ]);
        let answer = match self.reasoning_call(out, TemplateId::ChildAnswer, &vars) {
            Ok(text) => parse_answer(&text),
            Err(e) => {
                out.notes.push(e.to_string());
                Answer::unknown()
            }
        };
        if !answer.is_unknown() {
            out.answer = answer;
            return Ok(());
        }
        self.counters.parent_fallbacks += 1;
        let question = out.question.clone();
        self.direct_rag(out, &question, None)
    }

    fn sibling(&mut self, art: &Art, i: usize, done: &[Option<NodeOutcome>], out: &mut NodeOutcome) {
        out.method = Method::Sibling;
        let earlier = art.earlier_siblings(i);
        let refs = art.nodes[i].references();
        let mut used: Vec<usize> = earlier.iter().copied().filter(|s| refs.contains(s)).collect();
        if used.is_empty() {
            used = earlier;
        }
        let vars = Vars::from([
            ("question", out.question.clone()),
            ("pairs", self.pairs(&used, done)),
        ]);
        match self.reasoning_call(out, TemplateId::SiblingAnswer, &vars) {
            Ok(text) => out.answer = parse_answer(&text),
            Err(e) => {
                out.degraded = true;
                out.notes.push(e.to_string());
                out.answer = Answer::unknown();
            }
        }
    }
}

enum LeafAttempt {
    Done(Answer),
    /// Knowledge for the executor, what was retrieved, and for Filter the
    /// operator narrowed to the gate's survivors.
    Execute(ExecutorKnowledge, Retrieved, Option<ResolvedOperator>),
}
