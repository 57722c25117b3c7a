//! Operator call expressions: `Search("Michael Jordan", "scientist")`,
//! `Relate([4], "studio album")`, `Filter([1], "released between 2000 and 2010")`.
//!
//! Strings are double-quoted with backslash escapes. `[i]` is a placeholder
//! for the answer of node `i`; any other bracketed form is a list.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Answer, SubstituteError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Search,
    Relate,
    Filter,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Search => "Search",
            OpKind::Relate => "Relate",
            OpKind::Filter => "Filter",
        }
    }

    fn arity(self) -> (usize, usize) {
        match self {
            OpKind::Search => (1, 2),
            OpKind::Relate | OpKind::Filter => (2, 2),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arg {
    Text(String),
    Placeholder(usize),
    List(Vec<Arg>),
}

impl Arg {
    fn collect_placeholders(&self, out: &mut Vec<usize>) {
        match self {
            Arg::Text(_) => {}
            Arg::Placeholder(i) => out.push(*i),
            Arg::List(items) => items.iter().for_each(|a| a.collect_placeholders(out)),
        }
    }
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Text(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            Arg::Placeholder(i) => write!(f, "[{i}]"),
            Arg::List(items) => {
                f.write_str("[")?;
                for (n, a) in items.iter().enumerate() {
                    if n > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str("]")
            }
        }
    }
}

/// A parsed operator invocation. Arguments may still hold placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorSpec {
    pub op: OpKind,
    pub args: Vec<Arg>,
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.op)?;
        for (n, a) in self.args.iter().enumerate() {
            if n > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OperatorError {
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("{op} takes {expected} argument(s), got {found}")]
    Arity {
        op: OpKind,
        expected: &'static str,
        found: usize,
    },
    #[error("{op} argument {position}: {message}")]
    ArgType {
        op: OpKind,
        position: usize,
        message: &'static str,
    },
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
}

/// An operator with every placeholder replaced by a concrete value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResolvedOperator {
    Search {
        name: String,
        descriptor: Option<String>,
    },
    Relate {
        subject: String,
        second: String,
    },
    Filter {
        entities: Vec<String>,
        condition: String,
    },
}

impl ResolvedOperator {
    pub fn kind(&self) -> OpKind {
        match self {
            ResolvedOperator::Search { .. } => OpKind::Search,
            ResolvedOperator::Relate { .. } => OpKind::Relate,
            ResolvedOperator::Filter { .. } => OpKind::Filter,
        }
    }

    /// Back to an expression with literal arguments only.
    pub fn to_spec(&self) -> OperatorSpec {
        let text = |s: &str| Arg::Text(s.to_owned());
        match self {
            ResolvedOperator::Search { name, descriptor } => {
                let mut args = vec![text(name)];
                if let Some(d) = descriptor {
                    args.push(text(d));
                }
                OperatorSpec { op: OpKind::Search, args }
            }
            ResolvedOperator::Relate { subject, second } => OperatorSpec {
                op: OpKind::Relate,
                args: vec![text(subject), text(second)],
            },
            ResolvedOperator::Filter {
                entities,
                condition,
            } => OperatorSpec {
                op: OpKind::Filter,
                args: vec![
                    Arg::List(entities.iter().map(|e| text(e)).collect()),
                    text(condition),
                ],
            },
        }
    }
}

impl OperatorSpec {
    pub fn placeholders(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.args.iter().for_each(|a| a.collect_placeholders(&mut out));
        out
    }

    /// Checks arity and argument shapes. Called by the parser and by tree
    /// validation for programmatically built specs.
    pub fn check(&self) -> Result<(), OperatorError> {
        let (lo, hi) = self.op.arity();
        if self.args.len() < lo || self.args.len() > hi {
            return Err(OperatorError::Arity {
                op: self.op,
                expected: if lo == hi { "exactly 2" } else { "1 or 2" },
                found: self.args.len(),
            });
        }
        for (i, arg) in self.args.iter().enumerate() {
            let list_ok = self.op == OpKind::Filter && i == 0;
            match arg {
                Arg::List(items) if list_ok => {
                    if items.iter().any(|a| matches!(a, Arg::List(_))) {
                        return Err(OperatorError::ArgType {
                            op: self.op,
                            position: i + 1,
                            message: "nested lists are not allowed",
                        });
                    }
                }
                Arg::List(_) => {
                    return Err(OperatorError::ArgType {
                        op: self.op,
                        position: i + 1,
                        message: "expected text, found a list",
                    })
                }
                Arg::Text(_) if list_ok => {
                    return Err(OperatorError::ArgType {
                        op: self.op,
                        position: 1,
                        message: "expected an entity list or placeholder",
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Substitutes answers into the arguments.
    ///
    /// In text positions a list answer is joined with `", "`; in Filter's
    /// entity-list position it is spliced element-wise.
    pub fn resolve(
        &self,
        answers: &BTreeMap<usize, Answer>,
    ) -> Result<ResolvedOperator, SubstituteError> {
        let lookup = |i: usize| answers.get(&i).ok_or(SubstituteError::MissingAnswer(i));
        let text_arg = |a: &Arg| -> Result<String, SubstituteError> {
            match a {
                Arg::Text(s) => Ok(s.clone()),
                Arg::Placeholder(i) => Ok(lookup(*i)?.to_text()),
                Arg::List(_) => Err(SubstituteError::TypeMismatch(
                    "list argument in a text position".into(),
                )),
            }
        };
        match self.op {
            OpKind::Search => Ok(ResolvedOperator::Search {
                name: text_arg(&self.args[0])?,
                descriptor: self.args.get(1).map(text_arg).transpose()?,
            }),
            OpKind::Relate => Ok(ResolvedOperator::Relate {
                subject: text_arg(&self.args[0])?,
                second: text_arg(&self.args[1])?,
            }),
            OpKind::Filter => {
                let mut entities = Vec::new();
                splice_entities(&self.args[0], answers, &mut entities)?;
                Ok(ResolvedOperator::Filter {
                    entities,
                    condition: text_arg(&self.args[1])?,
                })
            }
        }
    }
}

fn splice_entities(
    arg: &Arg,
    answers: &BTreeMap<usize, Answer>,
    out: &mut Vec<String>,
) -> Result<(), SubstituteError> {
    match arg {
        Arg::Text(s) => out.push(s.clone()),
        Arg::Placeholder(i) => match answers.get(i) {
            None => return Err(SubstituteError::MissingAnswer(*i)),
            Some(Answer::List(items)) => out.extend(items.iter().cloned()),
            Some(Answer::Text(s)) => {
                return Err(SubstituteError::TypeMismatch(format!(
                    "answer of [{i}] is a scalar ({s:?}) where an entity list is required"
                )))
            }
        },
        Arg::List(items) => {
            for a in items {
                splice_entities(a, answers, out)?;
            }
        }
    }
    Ok(())
}

pub fn parse_operator(expr: &str) -> Result<OperatorSpec, OperatorError> {
    let mut p = Parser {
        src: expr,
        pos: 0,
    };
    p.skip_ws();
    let name_start = p.pos;
    while p.peek().is_some_and(|c| c.is_alphanumeric() || c == '_') {
        p.bump();
    }
    let name = &expr[name_start..p.pos];
    if name.is_empty() {
        return Err(p.syntax("expected an operator name"));
    }
    let op = match name {
        "Search" => OpKind::Search,
        "Relate" => OpKind::Relate,
        "Filter" => OpKind::Filter,
        other => return Err(OperatorError::UnknownOperator(other.to_owned())),
    };
    p.skip_ws();
    p.expect('(')?;
    let args = p.args_until(')')?;
    p.skip_ws();
    if p.pos != expr.len() {
        return Err(p.syntax("trailing characters after operator call"));
    }
    let spec = OperatorSpec { op, args };
    spec.check()?;
    Ok(spec)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn syntax(&self, message: &str) -> OperatorError {
        OperatorError::Syntax {
            offset: self.pos,
            message: message.to_owned(),
        }
    }

    fn expect(&mut self, want: char) -> Result<(), OperatorError> {
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            _ => Err(self.syntax(&format!("expected `{want}`"))),
        }
    }

    /// Comma-separated args up to and including `close`.
    fn args_until(&mut self, close: char) -> Result<Vec<Arg>, OperatorError> {
        let mut out = Vec::new();
        self.skip_ws();
        if self.peek() == Some(close) {
            self.bump();
            return Ok(out);
        }
        loop {
            out.push(self.arg()?);
            self.skip_ws();
            match self.bump() {
                Some(',') => self.skip_ws(),
                Some(c) if c == close => return Ok(out),
                Some(_) => {
                    self.pos -= 1;
                    return Err(self.syntax(&format!("expected `,` or `{close}`")));
                }
                None => return Err(self.syntax(&format!("unbalanced: missing `{close}`"))),
            }
        }
    }

    fn arg(&mut self) -> Result<Arg, OperatorError> {
        match self.peek() {
            Some('"') => self.string().map(Arg::Text),
            Some('[') => {
                let rest = &self.src[self.pos + 1..];
                let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
                if digits > 0 && rest.as_bytes().get(digits) == Some(&b']') {
                    let n = rest[..digits]
                        .parse()
                        .map_err(|_| self.syntax("placeholder index out of range"))?;
                    self.pos += digits + 2;
                    Ok(Arg::Placeholder(n))
                } else {
                    self.bump();
                    self.args_until(']').map(Arg::List)
                }
            }
            Some(_) => Err(self.syntax("expected a quoted string, placeholder or list")),
            None => Err(self.syntax("unexpected end of input")),
        }
    }

    fn string(&mut self) -> Result<String, OperatorError> {
        self.bump();
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(self.syntax("unterminated string")),
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some(c @ ('"' | '\\' | '[' | ']')) => out.push(c),
                    Some(_) => return Err(self.syntax("unknown escape")),
                    None => return Err(self.syntax("unterminated string")),
                },
                Some(c) => out.push(c),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(s: &str) -> Arg {
        Arg::Text(s.into())
    }

    #[test]
    fn parses_search_with_descriptor() {
        let spec = parse_operator(r#"Search("Michael Jordan", "scientist")"#).unwrap();
        assert_eq!(spec.op, OpKind::Search);
        assert_eq!(spec.args, vec![text("Michael Jordan"), text("scientist")]);
    }

    #[test]
    fn parses_filter_placeholder() {
        let spec = parse_operator(r#"Filter([2], "released between 2000 and 2010")"#).unwrap();
        assert_eq!(
            spec.args,
            vec![Arg::Placeholder(2), text("released between 2000 and 2010")]
        );
    }

    #[test]
    fn parses_literal_list_and_escapes() {
        let spec =
            parse_operator(r#"Filter(["Lionel Messi", [3], "A \"B\""], "born in 1955")"#).unwrap();
        assert_eq!(
            spec.args[0],
            Arg::List(vec![text("Lionel Messi"), Arg::Placeholder(3), text("A \"B\"")])
        );
    }

    #[test]
    fn relate_needs_two_args() {
        assert!(matches!(
            parse_operator(r#"Relate("x")"#),
            Err(OperatorError::Arity { op: OpKind::Relate, found: 1, .. })
        ));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(
            parse_operator(r#"search("x")"#),
            Err(OperatorError::UnknownOperator("search".into()))
        );
        assert!(matches!(
            parse_operator(r#"Search("x)"#),
            Err(OperatorError::Syntax { .. })
        ));
        assert!(matches!(
            parse_operator(r#"Filter(["a", "b", "c")"#),
            Err(OperatorError::Syntax { .. })
        ));
        assert!(matches!(
            parse_operator(r#"Search("a") extra"#),
            Err(OperatorError::Syntax { .. })
        ));
        assert!(matches!(
            parse_operator(r#"Filter("a", "b")"#),
            Err(OperatorError::ArgType { .. })
        ));
        assert!(matches!(
            parse_operator(r#"Relate(["a"], "b")"#),
            Err(OperatorError::ArgType { .. })
        ));
    }

    #[test]
    fn display_is_reparseable() {
        let src = r#"Filter(["a\\b", [1]], "say \"hi\"")"#;
        let spec = parse_operator(src).unwrap();
        assert_eq!(spec.to_string(), src);
        assert_eq!(parse_operator(&spec.to_string()).unwrap(), spec);
    }

    #[test]
    fn resolves_text_and_splice_positions() {
        let mut answers = BTreeMap::new();
        answers.insert(2, Answer::List(vec!["A".into(), "B".into()]));
        answers.insert(4, Answer::Text("Shakira".into()));

        let filter = parse_operator(r#"Filter([2], "cond")"#).unwrap();
        assert_eq!(
            filter.resolve(&answers).unwrap(),
            ResolvedOperator::Filter {
                entities: vec!["A".into(), "B".into()],
                condition: "cond".into()
            }
        );

        let relate = parse_operator(r#"Relate([2], [4])"#).unwrap();
        assert_eq!(
            relate.resolve(&answers).unwrap(),
            ResolvedOperator::Relate {
                subject: "A, B".into(),
                second: "Shakira".into()
            }
        );

        let bad = parse_operator(r#"Filter([4], "cond")"#).unwrap();
        assert!(matches!(
            bad.resolve(&answers),
            Err(SubstituteError::TypeMismatch(_))
        ));
        let missing = parse_operator(r#"Search([7])"#).unwrap();
        assert_eq!(
            missing.resolve(&answers),
            Err(SubstituteError::MissingAnswer(7))
        );
    }
}
