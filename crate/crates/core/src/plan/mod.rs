//! Atomic reasoning trees: the in-memory model, the JSON plan document the
//! planner emits, validation and traversal.
//!
//! Nodes are indexed in BFS order with the root at 0. Sub-questions may
//! mention `[i]`, which is replaced by the answer of node `i` once that node
//! has been evaluated.

mod operator;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use operator::{parse_operator, Arg, OpKind, OperatorError, OperatorSpec, ResolvedOperator};
pub use validate::{validate_art, RuleClass, Violation};

use crate::text::placeholders;

/// The answer recorded for a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    List(Vec<String>),
    Text(String),
}

pub const UNKNOWN: &str = "Unknown";

impl Answer {
    pub fn unknown() -> Self {
        Answer::Text(UNKNOWN.to_owned())
    }

    /// Text form used in text positions and for scoring: lists are joined
    /// with `", "`.
    pub fn to_text(&self) -> String {
        match self {
            Answer::List(items) => items.join(", "),
            Answer::Text(s) => s.clone(),
        }
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, Answer::Text(s) if s.trim().eq_ignore_ascii_case(UNKNOWN))
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubstituteError {
    #[error("no answer recorded for placeholder [{0}]")]
    MissingAnswer(usize),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
}

/// Replaces every `[i]` in `template` with the text form of answer `i`.
pub fn substitute_text(
    template: &str,
    answers: &BTreeMap<usize, Answer>,
) -> Result<String, SubstituteError> {
    let refs = placeholders(template);
    if refs.is_empty() {
        return Ok(template.to_owned());
    }
    let mut out = template.to_owned();
    for i in refs {
        let answer = answers.get(&i).ok_or(SubstituteError::MissingAnswer(i))?;
        out = out.replacen(&format!("[{i}]"), &answer.to_text(), 1);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Root,
    Composite,
    Atomic,
    DirectReasoning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtNode {
    pub index: usize,
    pub question: String,
    pub kind: NodeKind,
    pub operator: Option<OperatorSpec>,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
}

impl ArtNode {
    /// All placeholder references in the question and operator arguments.
    pub fn references(&self) -> Vec<usize> {
        let mut refs = placeholders(&self.question);
        if let Some(op) = &self.operator {
            refs.extend(op.placeholders());
        }
        refs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Art {
    pub source_question: String,
    pub nodes: Vec<ArtNode>,
}

impl Art {
    pub fn root(&self) -> &ArtNode {
        &self.nodes[0]
    }

    pub fn node(&self, index: usize) -> Option<&ArtNode> {
        self.nodes.get(index)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Earlier siblings of `index` (same parent, smaller index).
    pub fn earlier_siblings(&self, index: usize) -> Vec<usize> {
        let Some(parent) = self.nodes.get(index).and_then(|n| n.parent) else {
            return Vec::new();
        };
        self.nodes[parent]
            .children
            .iter()
            .copied()
            .filter(|&c| c < index)
            .collect()
    }

    /// Edges on the longest root-to-leaf path. Operators live on their
    /// sub-question node, so they add no level.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            let d = depth[i] + 1;
            for &c in &node.children {
                if let Some(slot) = depth.get_mut(c) {
                    *slot = d;
                    max = max.max(d);
                }
            }
        }
        max
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("operator error at node {node}: {source}")]
    Operator {
        node: usize,
        #[source]
        source: OperatorError,
    },
    #[error("placeholder error: {0}")]
    Placeholder(String),
}

/// Wire form of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDocument {
    pub question: String,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub idx: usize,
    pub q: String,
    #[serde(default)]
    pub children: Vec<usize>,
    #[serde(default)]
    pub op: Option<String>,
    #[serde(default)]
    pub dr: bool,
}

impl PlanDocument {
    pub fn into_art(self) -> Result<Art, PlanError> {
        if self.nodes.is_empty() {
            return Err(PlanError::Schema("plan has no nodes".into()));
        }
        let n = self.nodes.len();
        let mut parent = vec![None; n];
        for (pos, rec) in self.nodes.iter().enumerate() {
            if rec.idx != pos {
                return Err(PlanError::Index(format!(
                    "record {pos} has idx {}; nodes must be sorted and numbered 0..{}",
                    rec.idx,
                    n - 1
                )));
            }
            for &c in &rec.children {
                if c >= n {
                    return Err(PlanError::Index(format!(
                        "node {pos}: child {c} does not exist"
                    )));
                }
                if c == 0 {
                    return Err(PlanError::Index(format!(
                        "node {pos}: the root cannot be a child"
                    )));
                }
                if let Some(other) = parent[c].replace(pos) {
                    return Err(PlanError::Index(format!(
                        "node {c} is a child of both {other} and {pos}"
                    )));
                }
            }
        }

        let mut nodes = Vec::with_capacity(n);
        for rec in self.nodes {
            let idx = rec.idx;
            let kind = match (idx, rec.op.is_some(), rec.dr) {
                (0, false, false) => NodeKind::Root,
                (0, _, _) => {
                    return Err(PlanError::Schema(
                        "node 0: the root cannot carry an operator or a [DR] mark".into(),
                    ))
                }
                (_, true, true) => {
                    return Err(PlanError::Schema(format!(
                        "node {idx}: a node cannot be both an operator leaf and [DR]"
                    )))
                }
                (_, true, false) => NodeKind::Atomic,
                (_, false, true) => NodeKind::DirectReasoning,
                (_, false, false) => NodeKind::Composite,
            };
            let operator = rec
                .op
                .as_deref()
                .map(parse_operator)
                .transpose()
                .map_err(|source| PlanError::Operator { node: idx, source })?;
            nodes.push(ArtNode {
                index: idx,
                question: rec.q,
                kind,
                operator,
                children: rec.children,
                parent: parent[idx],
            });
        }
        let art = Art {
            source_question: self.question,
            nodes,
        };
        if let Some(v) = validate_art(&art).into_iter().next() {
            return Err(v.into_error());
        }
        Ok(art)
    }

    pub fn from_art(art: &Art) -> Self {
        PlanDocument {
            question: art.source_question.clone(),
            nodes: art
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    idx: n.index,
                    q: n.question.clone(),
                    children: n.children.clone(),
                    op: n.operator.as_ref().map(ToString::to_string),
                    dr: n.kind == NodeKind::DirectReasoning,
                })
                .collect(),
        }
    }
}

pub fn parse_art(plan_text: &str) -> Result<Art, PlanError> {
    let doc: PlanDocument =
        serde_json::from_str(plan_text).map_err(|e| PlanError::Schema(e.to_string()))?;
    doc.into_art()
}

pub fn serialize_art(art: &Art) -> String {
    serde_json::to_string_pretty(&PlanDocument::from_art(art))
        .expect("plan documents always serialize")
}

/// Children before parents, siblings in index order.
pub fn post_order(art: &Art) -> Vec<usize> {
    fn visit(art: &Art, i: usize, out: &mut Vec<usize>) {
        for &c in &art.nodes[i].children {
            visit(art, c, out);
        }
        out.push(i);
    }
    let mut out = Vec::with_capacity(art.len());
    if !art.is_empty() {
        visit(art, 0, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthStats {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("depth statistics need at least one tree")]
pub struct EmptyInput;

pub fn depth_stats(arts: &[Art]) -> Result<DepthStats, EmptyInput> {
    if arts.is_empty() {
        return Err(EmptyInput);
    }
    let mut depths: Vec<usize> = arts.iter().map(Art::depth).collect();
    depths.sort_unstable();
    let n = depths.len();
    let median = if n % 2 == 1 {
        depths[n / 2] as f64
    } else {
        (depths[n / 2 - 1] + depths[n / 2]) as f64 / 2.0
    };
    Ok(DepthStats {
        mean: depths.iter().sum::<usize>() as f64 / n as f64,
        median,
        min: depths[0] as f64,
        max: depths[n - 1] as f64,
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn parses_shakira_tree() {
        let art = parse_art(SHAKIRA_PLAN).unwrap();
        assert_eq!(art.len(), 6);
        assert_eq!(art.count(NodeKind::Atomic), 3);
        assert_eq!(art.count(NodeKind::DirectReasoning), 1);
        assert_eq!(art.nodes[4].parent, Some(1));
        assert_eq!(art.depth(), 2);
        assert_eq!(post_order(&art), vec![4, 5, 1, 2, 3, 0]);
    }

    #[test]
    fn parses_minimal_tree() {
        let art = parse_art(MINIMAL_PLAN).unwrap();
        assert_eq!(art.len(), 2);
        assert_eq!(art.depth(), 1);
        assert_eq!(post_order(&art), vec![1, 0]);
    }

    #[test]
    fn chain_post_order() {
        let plan = r#"{"question": "q", "nodes": [
            {"idx": 0, "q": "q", "children": [1]},
            {"idx": 1, "q": "a", "children": [2]},
            {"idx": 2, "q": "b", "op": "Search(\"x\")"}]}"#;
        assert_eq!(post_order(&parse_art(plan).unwrap()), vec![2, 1, 0]);
    }

    #[test]
    fn dr_referencing_nephew_is_placeholder_error() {
        let plan = SHAKIRA_PLAN.replace("How many albums are in [2]?", "How many albums are in [4]?");
        assert!(matches!(parse_art(&plan), Err(PlanError::Placeholder(_))));
    }

    #[test]
    fn schema_and_index_errors() {
        assert!(matches!(parse_art("not json"), Err(PlanError::Schema(_))));
        assert!(matches!(
            parse_art(r#"{"question": "q", "nodes": []}"#),
            Err(PlanError::Schema(_))
        ));
        let renumbered = SHAKIRA_PLAN.replace(r#""idx": 5"#, r#""idx": 6"#);
        assert!(matches!(parse_art(&renumbered), Err(PlanError::Index(_))));
        let dangling = SHAKIRA_PLAN.replace("[4, 5]", "[4, 9]");
        assert!(matches!(parse_art(&dangling), Err(PlanError::Index(_))));
        let bad_op = SHAKIRA_PLAN.replace(r#"Relate([4], \"studio album\")"#, r#"Relate([4])"#);
        assert!(matches!(
            parse_art(&bad_op),
            Err(PlanError::Operator { node: 5, .. })
        ));
    }

    #[test]
    fn mutated_index_after_serialize_is_index_error() {
        let art = parse_art(SHAKIRA_PLAN).unwrap();
        let text = serialize_art(&art).replace("\"idx\": 3", "\"idx\": 7");
        assert!(matches!(parse_art(&text), Err(PlanError::Index(_))));
    }

    #[test]
    fn round_trips() {
        for src in [SHAKIRA_PLAN, MINIMAL_PLAN] {
            let art = parse_art(src).unwrap();
            let text = serialize_art(&art);
            assert_eq!(parse_art(&text).unwrap(), art);
            assert_eq!(serialize_art(&parse_art(&text).unwrap()), text);
        }
    }

    #[test]
    fn substitutes_text_positions() {
        let mut answers = BTreeMap::new();
        answers.insert(
            2,
            Answer::List(vec!["Laundry Service".into(), "Oral Fixation".into()]),
        );
        assert_eq!(
            substitute_text("How many albums are in [2]?", &answers).unwrap(),
            "How many albums are in Laundry Service, Oral Fixation?"
        );
        assert_eq!(
            substitute_text("[7]", &answers),
            Err(SubstituteError::MissingAnswer(7))
        );
    }

    #[test]
    fn unknown_sentinel() {
        assert!(Answer::Text("  unknown ".into()).is_unknown());
        assert!(!Answer::Text("Unknown Pleasures".into()).is_unknown());
        assert!(!Answer::List(vec!["Unknown".into()]).is_unknown());
    }

    #[test]
    fn depth_statistics() {
        let shakira = parse_art(SHAKIRA_PLAN).unwrap();
        let minimal = parse_art(MINIMAL_PLAN).unwrap();
        let s = depth_stats(std::slice::from_ref(&shakira)).unwrap();
        assert_eq!((s.mean, s.median, s.min, s.max), (2.0, 2.0, 2.0, 2.0));
        let s = depth_stats(std::slice::from_ref(&minimal)).unwrap();
        assert_eq!((s.mean, s.median, s.min, s.max), (1.0, 1.0, 1.0, 1.0));
        let s = depth_stats(&[shakira, minimal]).unwrap();
        assert_eq!((s.mean, s.median), (1.5, 1.5));
        assert_eq!(depth_stats(&[]), Err(EmptyInput));
    }
}
