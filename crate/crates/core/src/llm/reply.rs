//! Extracting answers from model replies.
//!
//! Executors must end with a final line that is a JSON list of strings, a
//! JSON string, or `Unknown`. Reasoning prompts use the same grammar but
//! fall back to the bare final line.

use crate::plan::{Answer, UNKNOWN};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FinalLine {
    List(Vec<String>),
    Scalar(String),
    Unknown,
}

fn last_line(reply: &str) -> Option<&str> {
    reply.lines().map(str::trim).rfind(|l| !l.is_empty())
}

fn strip_label(line: &str) -> &str {
    for label in ["Final answer:", "Answer:", "final answer:", "answer:"] {
        if let Some(rest) = line.strip_prefix(label) {
            return rest.trim();
        }
    }
    line
}

/// Strict parse for operator executors. `None` means the reply broke the
/// output contract.
pub fn parse_final_line(reply: &str) -> Option<FinalLine> {
    let line = strip_label(last_line(reply)?);
    if line.eq_ignore_ascii_case(UNKNOWN) {
        return Some(FinalLine::Unknown);
    }
    if line.starts_with('[') {
        let items: Vec<serde_json::Value> = serde_json::from_str(line).ok()?;
        return items
            .into_iter()
            .map(|v| match v {
                serde_json::Value::String(s) => Some(s),
                serde_json::Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(FinalLine::List);
    }
    if line.starts_with('"') {
        return serde_json::from_str::<String>(line).ok().map(FinalLine::Scalar);
    }
    None
}

/// Lenient parse for child, sibling and direct-RAG answers.
pub fn parse_answer(reply: &str) -> Answer {
    match parse_final_line(reply) {
        Some(FinalLine::List(items)) => Answer::List(items),
        Some(FinalLine::Scalar(s)) => Answer::Text(s),
        Some(FinalLine::Unknown) => Answer::unknown(),
        None => match last_line(reply) {
            Some(line) => Answer::Text(strip_label(line).to_owned()),
            None => Answer::unknown(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_grammar() {
        assert_eq!(
            parse_final_line("reasoning...\n[\"a\", \"b\"]\n"),
            Some(FinalLine::List(vec!["a".into(), "b".into()]))
        );
        assert_eq!(
            parse_final_line("Answer: \"August 4th, 1961\""),
            Some(FinalLine::Scalar("August 4th, 1961".into()))
        );
        assert_eq!(parse_final_line(" unknown "), Some(FinalLine::Unknown));
        assert_eq!(parse_final_line("[5]"), Some(FinalLine::List(vec!["5".into()])));
        assert_eq!(parse_final_line("the answer is Paris"), None);
        assert_eq!(parse_final_line("[\"unterminated"), None);
        assert_eq!(parse_final_line(""), None);
    }

    #[test]
    fn lenient_answers() {
        assert_eq!(
            parse_answer("Shakira is a Colombian singer"),
            Answer::Text("Shakira is a Colombian singer".into())
        );
        assert!(parse_answer("UNKNOWN").is_unknown());
        assert!(parse_answer("   ").is_unknown());
        assert_eq!(parse_answer("\"5\""), Answer::Text("5".into()));
    }
}
