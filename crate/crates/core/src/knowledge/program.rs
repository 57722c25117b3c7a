//! The KG path of retrieval: operator leaves run symbolically against the
//! store; anything else asks the LLM for a one-step program.
//!
//! Program grammar, one step per reply:
//!
//! ```text
//! search("name")  |  search("name", "descriptor")
//! relate("name" | ID, "relation, attribute key or entity name")
//! filter(["name", ...], "<key> (= | < | > | within) <value>")
//! ```

use thiserror::Error;

use super::kg::KgStore;
use super::predicate::{Predicate, PredicateParseError};
use crate::llm::{CallMeter, Gateway, LlmError, TemplateId, Vars};
use crate::operators::AnswerValue;
use crate::plan::{parse_operator, OperatorError, ResolvedOperator, SubstituteError};

#[derive(Debug, Error)]
pub enum ProgramParseError {
    #[error("no program step in reply {0:?}")]
    NoStep(String),
    #[error("bad program step: {0}")]
    Step(#[from] OperatorError),
    #[error("program steps cannot use placeholders")]
    Placeholder(#[from] SubstituteError),
    #[error(transparent)]
    Condition(#[from] PredicateParseError),
}

#[derive(Debug, Error)]
pub enum KgQueryError {
    #[error(transparent)]
    Program(#[from] ProgramParseError),
    #[error("program generation failed: {0}")]
    Llm(#[from] LlmError),
}

#[derive(Debug)]
pub struct KgQueryOutput {
    pub result: Result<String, KgQueryError>,
    pub llm_calls: usize,
}

enum Symbolic {
    Answer(String),
    Unmatched,
}

/// Parses the first line of `reply` that holds a program step.
pub fn parse_program(reply: &str) -> Result<ResolvedOperator, ProgramParseError> {
    let line = reply
        .lines()
        .map(|l| l.trim().trim_matches('`').trim())
        .find(|l| {
            let lower = l.to_ascii_lowercase();
            ["search(", "relate(", "filter("]
                .iter()
                .any(|p| lower.starts_with(p))
        })
        .ok_or_else(|| ProgramParseError::NoStep(reply.trim().to_owned()))?;
    let open = line.find('(').unwrap_or(0);
    let mut name = line[..open].to_ascii_lowercase();
    name[..1].make_ascii_uppercase();
    let expr = format!("{name}{}", quote_bare_words(&line[open..]));
    let spec = parse_operator(&expr)?;
    Ok(spec.resolve(&Default::default())?)
}

/// Wraps unquoted identifiers such as `Q42` in double quotes.
fn quote_bare_words(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 8);
    let mut chars = s.chars().peekable();
    let bare = |c: char| c.is_alphanumeric() || "_-.:".contains(c);
    while let Some(c) = chars.next() {
        if c == '"' {
            out.push(c);
            while let Some(d) = chars.next() {
                out.push(d);
                if d == '\\' {
                    if let Some(e) = chars.next() {
                        out.push(e);
                    }
                } else if d == '"' {
                    break;
                }
            }
        } else if bare(c) {
            out.push('"');
            out.push(c);
            while let Some(&d) = chars.peek() {
                if !bare(d) {
                    break;
                }
                out.push(d);
                chars.next();
            }
            out.push('"');
        } else {
            out.push(c);
        }
    }
    out
}

/// Serialized KG answer for one retrieval. See the module docs for when
/// the LLM is consulted.
pub fn query_kg(
    store: &KgStore,
    subquestion: &str,
    operator: Option<&ResolvedOperator>,
    llm: &Gateway,
    meter: &CallMeter,
) -> KgQueryOutput {
    if let Some(op) = operator {
        if let Symbolic::Answer(a) = run_symbolic(store, op) {
            return KgQueryOutput {
                result: Ok(a),
                llm_calls: 0,
            };
        }
    }
    let vars = Vars::from([("question", subquestion.to_owned())]);
    let result = llm
        .ask(TemplateId::KgProgram, &vars, meter)
        .map_err(KgQueryError::from)
        .and_then(|reply| Ok(run_program(store, &parse_program(&reply.text)?)?));
    KgQueryOutput { result, llm_calls: 1 }
}

/// Runs a parsed program step. Unlike operator leaves, an unmatched
/// relation simply yields an empty answer.
pub fn run_program(store: &KgStore, step: &ResolvedOperator) -> Result<String, ProgramParseError> {
    if let ResolvedOperator::Filter { condition, .. } = step {
        Predicate::parse(condition)?;
    }
    Ok(match run_symbolic(store, step) {
        Symbolic::Answer(a) => a,
        Symbolic::Unmatched => String::new(),
    })
}

/// Entity ids for a name, or for an id given verbatim.
fn resolve(store: &KgStore, name_or_id: &str) -> Vec<String> {
    let ids = store.search(name_or_id, None);
    if !ids.is_empty() {
        return ids;
    }
    match store.entity(name_or_id.trim()) {
        Some(e) => vec![e.id.clone()],
        None => Vec::new(),
    }
}

fn run_symbolic(store: &KgStore, op: &ResolvedOperator) -> Symbolic {
    match op {
        ResolvedOperator::Search { name, descriptor } => {
            let ids = store.search(name, descriptor.as_deref());
            let labels: Vec<&str> = ids.iter().filter_map(|id| store.label(id)).collect();
            Symbolic::Answer(labels.join("; "))
        }
        ResolvedOperator::Relate { subject, second } => {
            let ids = resolve(store, subject);
            if ids.is_empty() {
                return Symbolic::Answer(String::new());
            }
            let mut parts: Vec<String> = Vec::new();
            for id in &ids {
                let Ok(answer) = store.relate(id, second) else {
                    continue;
                };
                let text = match answer.value {
                    AnswerValue::Entities(labels) => labels.join("; "),
                    AnswerValue::Attribute(v) | AnswerValue::Relation(v) => v,
                };
                if !text.is_empty() && !parts.contains(&text) {
                    parts.push(text);
                }
            }
            if parts.is_empty() {
                Symbolic::Unmatched
            } else {
                Symbolic::Answer(parts.join("; "))
            }
        }
        ResolvedOperator::Filter {
            entities,
            condition,
        } => {
            let Ok(predicate) = Predicate::parse(condition) else {
                return Symbolic::Unmatched;
            };
            let mut resolved_any = false;
            let mut kept: Vec<&str> = Vec::new();
            for name in entities {
                let ids = resolve(store, name);
                resolved_any |= !ids.is_empty();
                if !store.filter(&ids, &predicate).is_empty() {
                    kept.push(name);
                }
            }
            if !resolved_any {
                return Symbolic::Answer(String::new());
            }
            Symbolic::Answer(kept.join("; "))
        }
    }
}
