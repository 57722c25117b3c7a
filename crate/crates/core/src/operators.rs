//! Semantics of the atomic operators: query formulation, the Filter
//! overlap gate, and execution by an LLM over retrieved knowledge.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::reply::{parse_final_line, FinalLine};
use crate::llm::{CallMeter, Gateway, LlmError, TemplateId, Vars};
use crate::plan::{Answer, OpKind, OperatorSpec, ResolvedOperator};
use crate::text::{fold_name, token_set};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg_id: Option<String>,
}

impl EntityRef {
    pub fn named(name: impl Into<String>) -> Self {
        EntityRef {
            name: name.into(),
            descriptor: None,
            kg_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum AnswerValue {
    Entities(Vec<String>),
    Attribute(String),
    Relation(String),
}

impl AnswerValue {
    pub fn to_answer(&self) -> Answer {
        match self {
            AnswerValue::Entities(items) => Answer::List(items.clone()),
            AnswerValue::Attribute(s) | AnswerValue::Relation(s) => Answer::Text(s.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMethod {
    OperatorLlm,
    KgSymbolic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalAnswer {
    pub value: AnswerValue,
    pub evidence: Vec<String>,
    pub method: AnswerMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("gate threshold must lie in [0, 1], got {0}")]
pub struct InvalidThreshold(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapGate {
    threshold: f64,
}

impl Default for OverlapGate {
    fn default() -> Self {
        OverlapGate { threshold: 0.5 }
    }
}

impl OverlapGate {
    pub fn new(threshold: f64) -> Result<Self, InvalidThreshold> {
        if (0.0..=1.0).contains(&threshold) {
            Ok(OverlapGate { threshold })
        } else {
            Err(InvalidThreshold(threshold))
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Entities are discarded only when strictly below the threshold.
    pub fn keeps(&self, overlap: f64) -> bool {
        overlap >= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("operator still holds placeholder [{0}]")]
pub struct UnsubstitutedPlaceholder(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("overlap coefficient of an empty query")]
pub struct EmptyQuery;

/// Retrieval queries for a fully substituted operator: one for Search and
/// Relate, one per input entity for Filter.
pub fn formulate_query(spec: &OperatorSpec) -> Result<Vec<String>, UnsubstitutedPlaceholder> {
    if let Some(&i) = spec.placeholders().first() {
        return Err(UnsubstitutedPlaceholder(i));
    }
    let resolved = spec
        .resolve(&Default::default())
        .expect("placeholder-free operators always resolve");
    Ok(queries_for(&resolved))
}

pub fn queries_for(op: &ResolvedOperator) -> Vec<String> {
    match op {
        ResolvedOperator::Search { name, descriptor } => vec![match descriptor {
            Some(d) => format!("{name} {d}"),
            None => name.clone(),
        }],
        ResolvedOperator::Relate { subject, second } => vec![format!("{subject} {second}")],
        ResolvedOperator::Filter {
            entities,
            condition,
        } => entities.iter().map(|e| format!("{e} {condition}")).collect(),
    }
}

/// `|q ∩ p| / min(|q|, |p|)`, and 0 when `p` is empty.
pub fn overlap_coefficient(q: &BTreeSet<String>, p: &BTreeSet<String>) -> Result<f64, EmptyQuery> {
    if q.is_empty() {
        return Err(EmptyQuery);
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let shared = q.intersection(p).count();
    Ok(shared as f64 / q.len().min(p.len()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateCandidate {
    pub entity: EntityRef,
    pub query: String,
    /// The entity's retrieved passages, concatenated in rank order.
    pub passage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub overlaps: Vec<f64>,
    /// Indices into the candidate list, in input order.
    pub survivors: Vec<usize>,
}

/// Scores each candidate's passage against its query and keeps those at or
/// above the gate threshold.
pub fn filter_gate(candidates: &[GateCandidate], gate: OverlapGate) -> Result<GateOutcome, EmptyQuery> {
    let mut overlaps = Vec::with_capacity(candidates.len());
    let mut survivors = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let o = overlap_coefficient(&token_set(&c.query), &token_set(&c.passage))?;
        if gate.keeps(o) {
            survivors.push(i);
        }
        overlaps.push(o);
    }
    Ok(GateOutcome { overlaps, survivors })
}

#[derive(Debug, Error)]
pub enum ExecutionError {
    /// The executor could not produce a usable answer. The engine recovers
    /// with direct retrieval-augmented answering.
    #[error("operator execution failed: {0}")]
    OperatorExecutionFailure(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Knowledge handed to the executor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecutorKnowledge {
    pub text: String,
    pub evidence: Vec<String>,
}

/// Runs one operator through the LLM executor.
///
/// Search and Relate return what the executor states: a list becomes an
/// entity list, a scalar becomes an attribute value. Filter output is
/// matched back to the input entities; anything else is dropped.
pub fn execute_operator(
    op: &ResolvedOperator,
    subquestion: &str,
    knowledge: &ExecutorKnowledge,
    llm: &Gateway,
    meter: &CallMeter,
) -> Result<LocalAnswer, ExecutionError> {
    if knowledge.text.trim().is_empty() {
        return Err(ExecutionError::OperatorExecutionFailure("no knowledge retrieved".into()));
    }
    let template = match op.kind() {
        OpKind::Search => TemplateId::ExecutorSearch,
        OpKind::Relate => TemplateId::ExecutorRelate,
        OpKind::Filter => TemplateId::ExecutorFilter,
    };
    let vars = Vars::from([
        ("question", subquestion.to_owned()),
        ("operator", op.to_spec().to_string()),
        ("knowledge", knowledge.text.clone()),
    ]);
    let reply = llm.ask(template, &vars, meter)?;
    let line = parse_final_line(&reply.text).ok_or_else(|| {
        ExecutionError::OperatorExecutionFailure(format!(
            "executor reply does not end in an answer line: {:?}",
            reply.text.lines().last().unwrap_or("")
        ))
    })?;
    let value = match (op, line) {
        (_, FinalLine::Unknown) => {
            return Err(ExecutionError::OperatorExecutionFailure(
                "executor could not conclude".into(),
            ))
        }
        (ResolvedOperator::Filter { entities, .. }, FinalLine::List(items)) => {
            AnswerValue::Entities(restrict_to_inputs(entities, &items))
        }
        (ResolvedOperator::Filter { entities, .. }, FinalLine::Scalar(s)) => {
            AnswerValue::Entities(restrict_to_inputs(entities, &[s]))
        }
        (ResolvedOperator::Search { .. }, FinalLine::Scalar(s)) => AnswerValue::Entities(vec![s]),
        (ResolvedOperator::Relate { .. }, FinalLine::Scalar(s)) => AnswerValue::Attribute(s),
        (_, FinalLine::List(items)) => AnswerValue::Entities(items),
    };
    Ok(LocalAnswer {
        value,
        evidence: knowledge.evidence.clone(),
        method: AnswerMethod::OperatorLlm,
    })
}

/// Whether two names plausibly denote the same entity: equal after folding,
/// or the same number of tokens with each pair equal or one a prefix of
/// the other (`Steve Jobs` / `Steven Jobs`).
pub fn same_name(a: &str, b: &str) -> bool {
    let (fa, fb) = (fold_name(a), fold_name(b));
    if fa == fb {
        return true;
    }
    let ta: Vec<&str> = fa.split(' ').collect();
    let tb: Vec<&str> = fb.split(' ').collect();
    ta.len() == tb.len()
        && ta
            .iter()
            .zip(&tb)
            .all(|(x, y)| x.starts_with(y) || y.starts_with(x))
}

/// Maps executor output onto the input entity list, keeping the input's
/// surface forms and order. Outputs that match no input are dropped.
pub fn restrict_to_inputs(inputs: &[String], output: &[String]) -> Vec<String> {
    inputs
        .iter()
        .filter(|input| {
            output.iter().any(|o| fold_name(o) == fold_name(input))
                || output.iter().any(|o| same_name(o, input))
        })
        .cloned()
        .collect()
}
