use std::collections::VecDeque;
use std::fmt;

use super::{post_order, Art, NodeKind, OperatorError, PlanError};

/// Which family of error a broken rule maps to when a plan is parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleClass {
    Schema,
    Index,
    Operator,
    Placeholder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<usize>,
    pub class: RuleClass,
    pub message: String,
    cause: Option<OperatorError>,
}

impl Violation {
    fn at(node: usize, class: RuleClass, message: impl Into<String>) -> Self {
        Violation {
            node: Some(node),
            class,
            message: message.into(),
            cause: None,
        }
    }

    pub(crate) fn into_error(self) -> PlanError {
        let text = self.to_string();
        match self.class {
            RuleClass::Schema => PlanError::Schema(text),
            RuleClass::Index => PlanError::Index(text),
            RuleClass::Placeholder => PlanError::Placeholder(text),
            RuleClass::Operator => match self.cause {
                Some(source) => PlanError::Operator {
                    node: self.node.unwrap_or_default(),
                    source,
                },
                None => PlanError::Schema(text),
            },
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(i) => write!(f, "node {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Lists every broken tree invariant. Empty means the tree is valid.
///
/// Structural problems (bad indices, broken links, non-BFS order) are
/// reported first; placeholder rules are only checked once the structure
/// is sound, since "completes before" is undefined otherwise.
pub fn validate_art(art: &Art) -> Vec<Violation> {
    use RuleClass::*;
    let mut out = Vec::new();
    let n = art.nodes.len();
    if n == 0 {
        out.push(Violation {
            node: None,
            class: Schema,
            message: "tree has no nodes".into(),
            cause: None,
        });
        return out;
    }

    for (pos, node) in art.nodes.iter().enumerate() {
        if node.index != pos {
            out.push(Violation::at(
                pos,
                Index,
                format!("stored index {} does not match position", node.index),
            ));
        }
    }

    let root = &art.nodes[0];
    if root.kind != NodeKind::Root {
        out.push(Violation::at(0, Schema, "node 0 must be the root"));
    }
    if root.parent.is_some() {
        out.push(Violation::at(0, Index, "root must not have a parent"));
    }
    if root.question != art.source_question {
        out.push(Violation::at(0, Schema, "root question differs from the source question"));
    }

    for (i, node) in art.nodes.iter().enumerate() {
        if i > 0 && node.kind == NodeKind::Root {
            out.push(Violation::at(i, Schema, "only node 0 may be the root"));
        }
        match node.kind {
            NodeKind::Atomic => {
                if !node.children.is_empty() {
                    out.push(Violation::at(i, Schema, "atomic node must be leaf"));
                }
                match &node.operator {
                    None => out.push(Violation::at(i, Schema, "atomic node has no operator")),
                    Some(op) => {
                        if let Err(e) = op.check() {
                            let mut v = Violation::at(i, Operator, e.to_string());
                            v.cause = Some(e);
                            out.push(v);
                        }
                    }
                }
            }
            NodeKind::DirectReasoning | NodeKind::Root | NodeKind::Composite => {
                if node.operator.is_some() {
                    out.push(Violation::at(i, Schema, "only atomic nodes carry an operator"));
                }
            }
        }
        match node.kind {
            NodeKind::Root | NodeKind::Composite if node.children.is_empty() => {
                out.push(Violation::at(i, Schema, "inner node has no children"));
            }
            NodeKind::DirectReasoning if !node.children.is_empty() => {
                out.push(Violation::at(i, Schema, "[DR] node must be leaf"));
            }
            _ => {}
        }
        for &c in &node.children {
            match art.nodes.get(c) {
                None => out.push(Violation::at(i, Index, format!("child {c} does not exist"))),
                Some(child) if child.parent != Some(i) => out.push(Violation::at(
                    c,
                    Index,
                    format!("listed as a child of {i} but its parent is {:?}", child.parent),
                )),
                Some(_) => {}
            }
        }
        if let Some(p) = node.parent {
            match art.nodes.get(p) {
                None => out.push(Violation::at(i, Index, format!("parent {p} does not exist"))),
                Some(parent) if !parent.children.contains(&i) => out.push(Violation::at(
                    i,
                    Index,
                    format!("parent {p} does not list it as a child"),
                )),
                Some(_) => {}
            }
        } else if i > 0 {
            out.push(Violation::at(i, Index, "non-root node has no parent"));
        }
    }

    // A BFS from the root following child order must visit 0, 1, .., n-1.
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    let mut expected = 0usize;
    let mut bfs_ok = true;
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        if i != expected {
            out.push(Violation::at(
                i,
                Index,
                format!("breadth-first position is {expected}"),
            ));
            bfs_ok = false;
            break;
        }
        expected += 1;
        for &c in &art.nodes[i].children {
            if c >= n {
                continue;
            }
            if seen[c] {
                out.push(Violation::at(c, Index, "reached twice (cycle or shared child)"));
                bfs_ok = false;
                continue;
            }
            seen[c] = true;
            queue.push_back(c);
        }
    }
    if bfs_ok && expected != n {
        for (i, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
            out.push(Violation::at(i, Index, "not reachable from the root"));
        }
    }

    if !out.is_empty() {
        return out;
    }

    let order = post_order(art);
    let mut finish = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        finish[i] = pos;
    }
    for (i, node) in art.nodes.iter().enumerate() {
        let siblings = art.earlier_siblings(i);
        for r in node.references() {
            if r >= n {
                out.push(Violation::at(i, Placeholder, format!("[{r}] does not exist")));
            } else if finish[r] >= finish[i] {
                out.push(Violation::at(
                    i,
                    Placeholder,
                    format!("[{r}] is not answered before this node"),
                ));
            } else if node.kind == NodeKind::DirectReasoning && !siblings.contains(&r) {
                out.push(Violation::at(
                    i,
                    Placeholder,
                    format!("[DR] node references [{r}], which is not an earlier sibling"),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::SHAKIRA_PLAN;
    use super::super::{parse_art, parse_operator};
    use super::*;

    fn shakira() -> Art {
        parse_art(SHAKIRA_PLAN).unwrap()
    }

    #[test]
    fn valid_tree_has_no_violations() {
        assert!(validate_art(&shakira()).is_empty());
    }

    #[test]
    fn atomic_with_children() {
        let mut art = shakira();
        art.nodes[4].children.push(5);
        art.nodes[5].parent = Some(4);
        art.nodes[1].children = vec![4];
        let v = validate_art(&art);
        assert_eq!(v[0].to_string(), "node 4: atomic node must be leaf");
    }

    #[test]
    fn composite_without_children() {
        let mut art = shakira();
        art.nodes[1].children.clear();
        art.nodes[4].parent = None;
        art.nodes[5].parent = None;
        let v = validate_art(&art);
        assert!(v.iter().any(|v| v.node == Some(1) && v.message.contains("no children")));
    }

    #[test]
    fn forward_reference() {
        let mut art = shakira();
        art.nodes[4].operator = Some(parse_operator(r#"Search([5])"#).unwrap());
        let v = validate_art(&art);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].class, RuleClass::Placeholder);
        assert_eq!(v[0].node, Some(4));
    }

    #[test]
    fn out_of_bfs_order() {
        let mut art = shakira();
        art.nodes[0].children = vec![1, 3, 2];
        let v = validate_art(&art);
        assert!(v.iter().any(|v| v.class == RuleClass::Index));
    }
}
