//! Prompt templates.
//!
//! Each template is a system instruction, two worked exemplars sent as
//! prior user/assistant turns, and a final user turn with `{slot}`
//! placeholders. Only the final turn is filled, so scripted matchers and
//! cache keys see the per-call task there. `{{` and `}}` are literal braces.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, LlmError};

pub type Vars = BTreeMap<&'static str, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    PlanGeneration,
    PlanRepair,
    ExecutorSearch,
    ExecutorRelate,
    ExecutorFilter,
    SourceSelection,
    ChildAnswer,
    SiblingAnswer,
    DirectRag,
    KgProgram,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::PlanGeneration,
        TemplateId::PlanRepair,
        TemplateId::ExecutorSearch,
        TemplateId::ExecutorRelate,
        TemplateId::ExecutorFilter,
        TemplateId::SourceSelection,
        TemplateId::ChildAnswer,
        TemplateId::SiblingAnswer,
        TemplateId::DirectRag,
        TemplateId::KgProgram,
    ];

    pub fn as_str(self) -> &'static str {
        template(self).name
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| LlmError::UnknownTemplate(s.to_owned()))
    }
}

struct Template {
    name: &'static str,
    slots: &'static [&'static str],
    system: &'static str,
    exemplars: &'static [(&'static str, &'static str)],
    user: &'static str,
}

const ANSWER_GRAMMAR: &str = "End your reply with one final line holding only the answer: \
a JSON list of strings such as [\"a\", \"b\"] for several entities, a JSON string such as \
\"1961\" for a single value, or the word Unknown if the evidence does not support an answer.";

fn template(id: TemplateId) -> &'static Template {
    match id {
        TemplateId::PlanGeneration => &PLAN_GENERATION,
        TemplateId::PlanRepair => &PLAN_REPAIR,
        TemplateId::ExecutorSearch => &EXECUTOR_SEARCH,
        TemplateId::ExecutorRelate => &EXECUTOR_RELATE,
        TemplateId::ExecutorFilter => &EXECUTOR_FILTER,
        TemplateId::SourceSelection => &SOURCE_SELECTION,
        TemplateId::ChildAnswer => &CHILD_ANSWER,
        TemplateId::SiblingAnswer => &SIBLING_ANSWER,
        TemplateId::DirectRag => &DIRECT_RAG,
        TemplateId::KgProgram => &KG_PROGRAM,
    }
}

static PLAN_GENERATION: Template = Template {
    name: "plan_generation",
    slots: &["question"],
    system: "You break a complex question into a tree of simpler sub-questions. \
Keep decomposing until every leaf can be answered by exactly one operator:\n\
- Search(\"name\", \"descriptor\") finds the entity with that name; the descriptor is optional and disambiguates.\n\
- Relate(\"entity\", \"relation or attribute or other entity\") follows one hop: tail entities for a relation, a value for an attribute, or the relation between two entities.\n\
- Filter([i], \"condition\") keeps the entities of list [i] that satisfy the condition.\n\
A leaf may instead be marked dr when it only needs the answers of earlier siblings (counting, comparing, yes/no).\n\
Number nodes breadth-first: the root is 0, its children 1..k left to right, then their children, and so on. \
Write [i] to refer to the answer of node i; a node may only refer to nodes answered before it, and a dr node only to earlier siblings.\n\
Reply with a single JSON object {\"question\": ..., \"nodes\": [{\"idx\", \"q\", \"children\", \"op\", \"dr\"}]} and nothing else. \
\"op\" is the operator expression for operator leaves and null otherwise.",
    exemplars: &[
        (
            "Question: Who directed the film that won Best Picture in 1998?",
            r#"{"question": "Who directed the film that won Best Picture in 1998?", "nodes": [
{"idx": 0, "q": "Who directed the film that won Best Picture in 1998?", "children": [1, 2], "op": null, "dr": false},
{"idx": 1, "q": "Which film won Best Picture in 1998?", "children": [], "op": "Relate(\"Academy Award for Best Picture 1998\", \"winner\")", "dr": false},
{"idx": 2, "q": "Who directed [1]?", "children": [], "op": "Relate([1], \"director\")", "dr": false}]}"#,
        ),
        (
            "Question: Are the Danube and the Rhine longer than 1000 km?",
            r#"{"question": "Are the Danube and the Rhine longer than 1000 km?", "nodes": [
{"idx": 0, "q": "Are the Danube and the Rhine longer than 1000 km?", "children": [1, 2, 3], "op": null, "dr": false},
{"idx": 1, "q": "How long is the Danube?", "children": [], "op": "Relate(\"Danube\", \"length\")", "dr": false},
{"idx": 2, "q": "How long is the Rhine?", "children": [], "op": "Relate(\"Rhine\", \"length\")", "dr": false},
{"idx": 3, "q": "Are [1] and [2] both longer than 1000 km?", "children": [], "op": null, "dr": true}]}"#,
        ),
    ],
    user: "Question: {question}",
};

static PLAN_REPAIR: Template = Template {
    name: "plan_repair",
    slots: &["question", "previous", "error"],
    system: "You fix reasoning-tree plans that failed validation. Keep the intent of the \
previous plan, fix only what the error names, and reply with the corrected JSON object only.",
    exemplars: &[],
    user: "Question: {question}\nPrevious plan:\n{previous}\nValidation error: {error}\nCorrected plan:",
};

static EXECUTOR_SEARCH: Template = Template {
    name: "executor_search",
    slots: &["question", "operator", "knowledge"],
    system: "You carry out a Search operator: using only the knowledge given, decide which \
entities the name and descriptor refer to. Prefer the entity that matches the descriptor; \
keep several only if the knowledge cannot tell them apart.",
    exemplars: &[
        (
            "Sub-question: Who is the scientist Michael Jordan?\nOperator: Search(\"Michael Jordan\", \"scientist\")\nKnowledge:\n[text] Michael I. Jordan: Michael Irwin Jordan is an American scientist and professor at Berkeley working on machine learning.\n[text] Michael Jordan: Michael Jeffrey Jordan is an American former professional basketball player.",
            "The descriptor asks for the scientist, which is Michael I. Jordan.\n[\"Michael I. Jordan\"]",
        ),
        (
            "Sub-question: Which city is Springfield?\nOperator: Search(\"Springfield\")\nKnowledge:\n[kg] Springfield",
            "Only one entity is known under this name.\n[\"Springfield\"]",
        ),
    ],
    user: "Sub-question: {question}\nOperator: {operator}\nKnowledge:\n{knowledge}",
};

static EXECUTOR_RELATE: Template = Template {
    name: "executor_relate",
    slots: &["question", "operator", "knowledge"],
    system: "You carry out a Relate operator, a single hop from the first argument. If the \
second argument is a relation, answer with the list of tail entities; if it is an attribute, \
answer with its value as a string; if it is another entity, answer with the list of relations \
linking the two.",
    exemplars: &[
        (
            "Sub-question: Who are Barack Obama's children?\nOperator: Relate(\"Barack Obama\", \"child\")\nKnowledge:\n[text] Barack Obama: Obama and his wife Michelle have two daughters, Malia and Sasha.",
            "The relation child gives two tail entities.\n[\"Malia Obama\", \"Sasha Obama\"]",
        ),
        (
            "Sub-question: When was Barack Obama born?\nOperator: Relate(\"Barack Obama\", \"date of birth\")\nKnowledge:\n[kg] August 4th, 1961",
            "date of birth is an attribute.\n\"August 4th, 1961\"",
        ),
    ],
    user: "Sub-question: {question}\nOperator: {operator}\nKnowledge:\n{knowledge}",
};

static EXECUTOR_FILTER: Template = Template {
    name: "executor_filter",
    slots: &["question", "operator", "knowledge"],
    system: "You carry out a Filter operator: keep exactly those input entities that the \
knowledge shows satisfy the condition. Never add entities that are not in the input.",
    exemplars: &[
        (
            "Sub-question: Which of them were born in 1955?\nOperator: Filter([\"Lionel Messi\", \"Steve Jobs\", \"Bill Gates\"], \"born in 1955\")\nKnowledge:\n## Lionel Messi\n[text] Lionel Messi (born 24 June 1987) is an Argentine footballer.\n## Steve Jobs\n[text] Steven Paul Jobs (February 24, 1955 – October 5, 2011) was an American businessman.\n## Bill Gates\n[text] William Henry Gates III (born October 28, 1955) is an American businessman.",
            "Jobs and Gates were born in 1955; Messi in 1987.\n[\"Steve Jobs\", \"Bill Gates\"]",
        ),
        (
            "Sub-question: Which of them are rivers?\nOperator: Filter([\"Danube\"], \"is a river\")\nKnowledge:\n## Danube\n[kg] Danube",
            "The Danube is a river.\n[\"Danube\"]",
        ),
    ],
    user: "Sub-question: {question}\nOperator: {operator}\nKnowledge:\n{knowledge}",
};

static SOURCE_SELECTION: Template = Template {
    name: "source_selection",
    slots: &["question", "sources"],
    system: "You choose where to look up knowledge for a question. kg is a knowledge graph of \
entities, relations and attributes; text is a local encyclopedic corpus; web is a live web \
search for recent or long-tail facts. Reply with a comma-separated list of the chosen \
sources, picked only from the available ones.",
    exemplars: &[
        (
            "Question: What is the date of birth of Marie Curie?\nAvailable: kg, text, web",
            "kg, text",
        ),
        (
            "Question: Who won yesterday's Formula 1 race?\nAvailable: kg, text, web",
            "web",
        ),
    ],
    user: "Question: {question}\nAvailable: {sources}",
};

static CHILD_ANSWER: Template = Template {
    name: "child_answer",
    slots: &["question", "pairs"],
    system: "You answer a question using only the answers to its sub-questions. If they do \
not determine the answer, reply Unknown.",
    exemplars: &[
        (
            "Question: Who directed the film that won Best Picture in 1998?\nSub-questions:\nQ: Which film won Best Picture in 1998?\nA: Titanic\nQ: Who directed Titanic?\nA: James Cameron",
            "\"James Cameron\"",
        ),
        (
            "Question: Where was the author of Dune born?\nSub-questions:\nQ: Who wrote Dune?\nA: Unknown",
            "Unknown",
        ),
    ],
    user: "Question: {question}\nSub-questions:\n{pairs}",
};

static SIBLING_ANSWER: Template = Template {
    name: "sibling_answer",
    slots: &["question", "pairs"],
    system: "You answer a question by reasoning directly over the answers of earlier questions \
(counting, comparing, combining). Do not use outside knowledge. If the answers are not \
enough, reply Unknown.",
    exemplars: &[
        (
            "Question: Are 2888 km and 1233 km both longer than 1000 km?\nEarlier answers:\nQ: How long is the Danube?\nA: 2888 km\nQ: How long is the Rhine?\nA: 1233 km",
            "\"yes\"",
        ),
        (
            "Question: How many albums are in Pies Descalzos, Donde Estan los Ladrones?\nEarlier answers:\nQ: Which albums were released before 2000?\nA: Pies Descalzos, Donde Estan los Ladrones",
            "\"2\"",
        ),
    ],
    user: "Question: {question}\nEarlier answers:\n{pairs}",
};

static DIRECT_RAG: Template = Template {
    name: "direct_rag",
    slots: &["question", "knowledge"],
    system: "You answer a question from the retrieved knowledge. Be brief.",
    exemplars: &[(
        "Question: What is the capital of Australia?\nKnowledge:\n[text] Canberra: Canberra is the capital city of Australia.",
        "\"Canberra\"",
    )],
    user: "Question: {question}\nKnowledge:\n{knowledge}",
};

static KG_PROGRAM: Template = Template {
    name: "kg_program",
    slots: &["question"],
    system: "You translate a question into one knowledge-graph program step. Steps:\n\
search(\"name\") or search(\"name\", \"descriptor\")\n\
relate(\"entity name\" or ID, \"relation or attribute or entity\")\n\
filter([\"entity\", ...], \"attribute (= | < | > | within) value\")\n\
Reply with the single step only.",
    exemplars: &[
        (
            "Question: Who are the children of Barack Obama?",
            "relate(\"Barack Obama\", \"child\")",
        ),
        (
            "Question: Which of Steve Jobs and Bill Gates were born in 1955?",
            "filter([\"Steve Jobs\", \"Bill Gates\"], \"date of birth within 1955\")",
        ),
    ],
    user: "Question: {question}",
};

/// Renders `id` into a message list.
pub fn render(id: TemplateId, vars: &Vars) -> Result<Vec<ChatMessage>, LlmError> {
    let t = template(id);
    for slot in t.slots {
        if !vars.contains_key(slot) {
            return Err(LlmError::MissingSlot {
                template: t.name,
                slot: (*slot).to_owned(),
            });
        }
    }
    let mut system = t.system.to_owned();
    if matches!(
        id,
        TemplateId::ExecutorSearch
            | TemplateId::ExecutorRelate
            | TemplateId::ExecutorFilter
            | TemplateId::ChildAnswer
            | TemplateId::SiblingAnswer
            | TemplateId::DirectRag
    ) {
        system.push('\n');
        system.push_str(ANSWER_GRAMMAR);
    }
    let mut messages = vec![ChatMessage::system(system)];
    for (user, assistant) in t.exemplars {
        messages.push(ChatMessage::user(*user));
        messages.push(ChatMessage::assistant(*assistant));
    }
    messages.push(ChatMessage::user(fill(t, vars)?));
    Ok(messages)
}

/// Like [`render`] but with the template named by its string id.
pub fn render_str(id: &str, vars: &Vars) -> Result<Vec<ChatMessage>, LlmError> {
    render(id.parse()?, vars)
}

fn fill(t: &Template, vars: &Vars) -> Result<String, LlmError> {
    let src = t.user;
    let mut out = String::with_capacity(src.len() + 64);
    let mut rest = src;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if let Some(after) = tail.strip_prefix('}') {
            out.push('}');
            rest = after;
            continue;
        }
        let end = tail.find('}').unwrap_or(tail.len());
        let name = &tail[1..end.min(tail.len())];
        match vars.get(name) {
            Some(v) if t.slots.contains(&name) => out.push_str(v),
            _ => {
                return Err(LlmError::MissingSlot {
                    template: t.name,
                    slot: name.to_owned(),
                })
            }
        }
        rest = &tail[(end + 1).min(tail.len())..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Slot names that appear in a template's user text.
#[cfg(test)]
fn referenced_slots(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find('{') {
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            rest = after;
            continue;
        }
        let end = tail.find('}').expect("unterminated slot");
        out.push(tail[1..end].to_owned());
        rest = &tail[end + 1..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&'static str, &str)]) -> Vars {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn every_slot_is_declared_and_ids_roundtrip() {
        for id in TemplateId::ALL {
            let t = template(id);
            let mut used = referenced_slots(t.user);
            used.sort();
            used.dedup();
            let mut declared: Vec<String> = t.slots.iter().map(|s| s.to_string()).collect();
            declared.sort();
            assert_eq!(used, declared, "template {}", t.name);
            assert_eq!(t.name.parse::<TemplateId>().unwrap(), id);
            let json = serde_json::to_string(&id).unwrap();
            assert_eq!(json, format!("\"{}\"", t.name));
        }
    }

    #[test]
    fn renders_source_selection() {
        let v = vars(&[("question", "Who is Shakira?"), ("sources", "kg, text, web")]);
        let msgs = render(TemplateId::SourceSelection, &v).unwrap();
        let last = &msgs.last().unwrap().content;
        assert!(last.contains("Who is Shakira?"));
        assert!(last.contains("kg, text, web"));
        assert_eq!(msgs, render(TemplateId::SourceSelection, &v).unwrap());
    }

    #[test]
    fn missing_slot_and_unknown_template() {
        let v = vars(&[("question", "q")]);
        assert!(matches!(
            render(TemplateId::SourceSelection, &v),
            Err(LlmError::MissingSlot { slot, .. }) if slot == "sources"
        ));
        assert!(matches!(
            render_str("nope", &v),
            Err(LlmError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn values_with_braces_are_not_reexpanded() {
        let v = vars(&[("question", "{sources}"), ("sources", "kg")]);
        let msgs = render(TemplateId::SourceSelection, &v).unwrap();
        assert_eq!(
            msgs.last().unwrap().content,
            "Question: {sources}\nAvailable: kg"
        );
    }
}
