//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde_json::json;
use treeqa_core::llm::{ChatBackend, ChatMessage, ChatRequest, ScriptRule, ScriptedBackend};
use treeqa_core::plan::{NodeRecord, PlanDocument};

pub const SHAKIRA_QUESTION: &str = "How many studio albums has Shakira released between 2000 and 2010?";

pub fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(rel)
}

pub fn read(rel: &str) -> String {
    std::fs::read_to_string(data(rel)).unwrap()
}

/// Leaf kinds produced by [`random_plan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leaf {
    Search,
    Relate,
    /// Filter over a literal two-entity list.
    FilterList,
    /// Filter over the answer of an earlier Search sibling.
    FilterRef,
    Dr,
}

enum Shape {
    Inner(Vec<Shape>),
    Leaf(Leaf),
}

fn shape(rng: &mut impl Rng, levels: usize) -> Shape {
    let n = rng.gen_range(1..=3);
    let forced = if levels > 1 { rng.gen_range(0..n) } else { usize::MAX };
    let children = (0..n)
        .map(|i| {
            if i == forced {
                shape(rng, levels - 1)
            } else if levels > 1 && rng.gen_bool(0.25) {
                let sub = rng.gen_range(1..levels);
                shape(rng, sub)
            } else {
                Shape::Leaf(match rng.gen_range(0..10) {
                    0..=2 => Leaf::Search,
                    3..=4 => Leaf::Relate,
                    5..=6 => Leaf::FilterList,
                    7 => Leaf::FilterRef,
                    _ => Leaf::Dr,
                })
            }
        })
        .collect();
    Shape::Inner(children)
}

/// A generated plan plus the kind of every leaf, by node index.
pub struct GeneratedPlan {
    pub doc: PlanDocument,
    pub leaves: Vec<Option<Leaf>>,
    pub depth: usize,
}

/// Builds a valid plan whose deepest inner-node chain has exactly `depth`
/// levels. FilterRef leaves without an earlier Search sibling fall back
/// to FilterList, and Dr leaves refer to an earlier sibling when there is
/// one.
pub fn random_plan(rng: &mut impl Rng, depth: usize) -> GeneratedPlan {
    assert!(depth >= 1);
    let root = shape(rng, depth);
    // Breadth-first numbering.
    let mut records: Vec<NodeRecord> = Vec::new();
    let mut leaves: Vec<Option<Leaf>> = Vec::new();
    let mut queue: std::collections::VecDeque<(usize, &Shape)> = std::collections::VecDeque::new();
    let question = format!("Generated question {}?", rng.gen::<u32>());
    records.push(NodeRecord {
        idx: 0,
        q: question.clone(),
        children: vec![],
        op: None,
        dr: false,
    });
    leaves.push(None);
    queue.push_back((0, &root));
    while let Some((idx, node)) = queue.pop_front() {
        let Shape::Inner(children) = node else { continue };
        let mut earlier: Vec<(usize, Option<Leaf>)> = Vec::new();
        for child in children {
            let c = records.len();
            records[idx].children.push(c);
            let mut rec = NodeRecord {
                idx: c,
                q: format!("Sub-question {c}?"),
                children: vec![],
                op: None,
                dr: false,
            };
            let mut kind = None;
            if let Shape::Leaf(leaf) = child {
                let search_sibling = earlier.iter().rev().find(|(_, k)| *k == Some(Leaf::Search)).map(|(i, _)| *i);
                let leaf = match (leaf, search_sibling) {
                    (Leaf::FilterRef, None) => Leaf::FilterList,
                    (l, _) => *l,
                };
                match leaf {
                    Leaf::Search => {
                        rec.q = format!("Who is alpha ({c})?");
                        rec.op = Some(if rng.gen_bool(0.5) {
                            "Search(\"alpha\")".into()
                        } else {
                            "Search(\"alpha\", \"singer\")".into()
                        });
                    }
                    Leaf::Relate => {
                        rec.q = format!("What color is gamma ({c})?");
                        rec.op = Some("Relate(\"gamma\", \"color\")".into());
                    }
                    Leaf::FilterList => {
                        rec.q = format!("Which of alpha and beta are red ({c})?");
                        rec.op = Some("Filter([\"alpha\", \"beta\"], \"is red\")".into());
                    }
                    Leaf::FilterRef => {
                        let j = search_sibling.unwrap();
                        rec.q = format!("Which of [{j}] are red?");
                        rec.op = Some(format!("Filter([{j}], \"is red\")"));
                    }
                    Leaf::Dr => {
                        rec.dr = true;
                        rec.q = match earlier.last() {
                            Some((j, _)) => format!("What follows from [{j}]?"),
                            None => format!("What follows ({c})?"),
                        };
                    }
                }
                kind = Some(leaf);
            }
            earlier.push((c, kind));
            records.push(rec);
            leaves.push(kind);
            queue.push_back((c, child));
        }
    }
    let doc = PlanDocument {
        question,
        nodes: records,
    };
    GeneratedPlan { doc, leaves, depth }
}

/// Corpus for generated plans: every Filter entity has a passage that
/// mentions it together with the condition, so the gate keeps it.
pub const BUDGET_CORPUS: &str = r#"{"title": "Alpha", "text": "alpha is red and a famous singer"}
{"title": "Beta", "text": "beta is red as well"}
{"title": "Gamma", "text": "gamma has the color blue"}
{"title": "Delta", "text": "delta is an unrelated entry"}
"#;

/// Script answering every template used by generated plans without ever
/// triggering a fallback.
pub fn budget_script() -> Vec<ScriptRule> {
    use treeqa_core::llm::TemplateId::*;
    vec![
        ScriptRule::template(ExecutorSearch, "[\"alpha\"]"),
        ScriptRule::template(ExecutorRelate, "\"blue\""),
        ScriptRule::template(ExecutorFilter, "[\"alpha\"]"),
        ScriptRule::template(ChildAnswer, "\"ok\""),
        ScriptRule::template(SiblingAnswer, "\"yes\""),
    ]
}

/// Retrievals a leaf makes against a single source.
pub fn expected_retrievals(leaf: Leaf) -> usize {
    match leaf {
        Leaf::Search | Leaf::Relate => 1,
        Leaf::FilterList => 2,
        // The referenced Search answers ["alpha"].
        Leaf::FilterRef => 1,
        Leaf::Dr => 0,
    }
}

/// Rules for the wire-level Shakira replay. Requests carry no template id
/// on the wire, so these match on the final user turn.
pub fn shakira_wire_rules() -> Vec<ScriptRule> {
    let albums = r#"["Pies Descalzos", "Dónde Están los Ladrones?", "Laundry Service", "Fijación Oral, Vol. 1", "Oral Fixation, Vol. 2", "She Wolf", "Sale el Sol", "El Dorado"]"#;
    let kept = r#"["Laundry Service", "Fijación Oral, Vol. 1", "Oral Fixation, Vol. 2", "She Wolf", "Sale el Sol"]"#;
    vec![
        ScriptRule::contains("Operator: Search(", "[\"Shakira\"]"),
        ScriptRule::contains("Operator: Relate(", albums),
        ScriptRule::contains("Operator: Filter(", kept),
        ScriptRule::contains("Earlier answers:", "\"5\""),
        ScriptRule::contains("Question: What studio albums has Shakira released?\nSub-questions:", albums),
        ScriptRule::contains("Sub-questions:", "\"5\""),
        ScriptRule::contains("", read("shakira/plan.json")),
    ]
}

/// A minimal OpenAI-style chat completions server answering from a
/// scripted backend. Counts the requests it serves.
pub struct MockChatServer {
    pub base_url: String,
    pub requests: Arc<AtomicUsize>,
}

impl MockChatServer {
    pub fn start(rules: Vec<ScriptRule>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let script = Arc::new(ScriptedBackend::new(rules));
        let counter = requests.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let script = script.clone();
                let counter = counter.clone();
                std::thread::spawn(move || serve(stream, &script, &counter));
            }
        });
        MockChatServer { base_url, requests }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, script: &ScriptedBackend, counter: &AtomicUsize) {
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0usize;
        loop {
            let mut header = String::new();
            if reader.read_line(&mut header).unwrap_or(0) == 0 {
                return;
            }
            if header == "\r\n" {
                break;
            }
            if let Some((k, v)) = header.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    length = v.trim().parse().unwrap();
                }
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body).unwrap();
        counter.fetch_add(1, Ordering::SeqCst);
        let value: serde_json::Value = serde_json::from_slice(&body).unwrap();
        let messages: Vec<ChatMessage> = serde_json::from_value(value["messages"].clone()).unwrap();
        let request = ChatRequest {
            model: value["model"].as_str().unwrap_or_default().to_owned(),
            messages,
            temperature: value["temperature"].as_f64().unwrap_or(0.0),
            template: None,
        };
        let (status, reply) = match script.complete(&request) {
            Ok(c) => (
                "200 OK",
                json!({"choices": [{"message": {"role": "assistant", "content": c.text}}],
                       "usage": {"prompt_tokens": 10, "completion_tokens": 2}}),
            ),
            Err(e) => ("400 Bad Request", json!({"error": e.to_string()})),
        };
        let text = reply.to_string();
        let head = format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
            text.len()
        );
        if writer.write_all(head.as_bytes()).and_then(|_| writer.write_all(text.as_bytes())).is_err() {
            return;
        }
    }
}
