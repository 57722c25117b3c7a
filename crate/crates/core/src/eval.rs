//! Dataset loading, answer normalization, token F1 and aggregate reports.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::engine::Counters;
use crate::text::strip_punctuation;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, strip punctuation, drop articles, split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    strip_punctuation(&text.to_lowercase())
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_owned)
        .collect()
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token F1 against the best-matching gold answer. An empty gold list
/// scores 0.
pub fn token_f1<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    let pred = normalize_answer(prediction);
    golds
        .iter()
        .map(|g| f1_single(&pred, &normalize_answer(g.as_ref())))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub meta: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Generic,
    HotpotQa,
    TwoWiki,
    Musique,
    Crag,
    BlendQa,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "generic" | "jsonl" => DatasetFormat::Generic,
            "hotpotqa" | "hotpot" => DatasetFormat::HotpotQa,
            "2wiki" | "2wikimultihopqa" => DatasetFormat::TwoWiki,
            "musique" => DatasetFormat::Musique,
            "crag" => DatasetFormat::Crag,
            "blendqa" => DatasetFormat::BlendQa,
            other => return Err(format!("unknown dataset format {other:?}")),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// `line` is the 1-based line for JSONL input, or the 1-based record
    /// position inside a top-level JSON array.
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

fn format_err(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Format {
        line,
        message: message.into(),
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<Example>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, format)
}

/// Parses dataset text. Input is either JSONL or a single JSON array of
/// records (the native HotpotQA and 2Wiki layout).
pub fn parse_dataset(text: &str, format: DatasetFormat) -> Result<Vec<Example>, DatasetError> {
    let mut records: Vec<(usize, Value)> = Vec::new();
    if text.trim_start().starts_with('[') {
        let all: Vec<Value> = serde_json::from_str(text).map_err(|e| format_err(e.line(), e.to_string()))?;
        records.extend(all.into_iter().enumerate().map(|(i, v)| (i + 1, v)));
    } else {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v = serde_json::from_str(line).map_err(|e| format_err(i + 1, e.to_string()))?;
            records.push((i + 1, v));
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, v) in records {
        let ex = adapt(v, format).map_err(|m| format_err(line, m))?;
        if !seen.insert(ex.id.clone()) {
            return Err(format_err(line, format!("duplicate id {:?}", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

fn take_str(obj: &mut Map<String, Value>, keys: &[&str]) -> Option<String> {
    for k in keys {
        match obj.remove(*k) {
            Some(Value::String(s)) => return Some(s),
            Some(Value::Number(n)) => return Some(n.to_string()),
            Some(Value::Bool(b)) => return Some(b.to_string()),
            _ => {}
        }
    }
    None
}

fn answers_from(v: Option<Value>) -> Result<Vec<String>, String> {
    match v {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::String(s)) => Ok(vec![s]),
        Some(Value::Number(n)) => Ok(vec![n.to_string()]),
        Some(Value::Bool(b)) => Ok(vec![b.to_string()]),
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|i| match i {
                Value::String(s) => Ok(s),
                Value::Number(n) => Ok(n.to_string()),
                other => Err(format!("answer {other} is not text")),
            })
            .collect(),
        Some(other) => Err(format!("answers field {other} is not text or a list")),
    }
}

fn adapt(v: Value, format: DatasetFormat) -> Result<Example, String> {
    let Value::Object(mut obj) = v else {
        return Err("record is not a JSON object".into());
    };
    let (id_keys, q_keys, type_keys): (&[&str], &[&str], &[&str]) = match format {
        DatasetFormat::Generic => (&["id"], &["question"], &["qtype"]),
        DatasetFormat::HotpotQa | DatasetFormat::TwoWiki => (&["_id", "id"], &["question"], &["type"]),
        DatasetFormat::Musique => (&["id"], &["question"], &[]),
        DatasetFormat::Crag => (&["interaction_id", "id"], &["query", "question"], &["question_type"]),
        DatasetFormat::BlendQa => (&["id", "qid"], &["question"], &["type", "qtype"]),
    };
    let id = take_str(&mut obj, id_keys).ok_or("missing id")?;
    let question = take_str(&mut obj, q_keys).ok_or("missing question")?;
    let mut qtype = take_str(&mut obj, type_keys);
    let mut gold_answers = match format {
        DatasetFormat::Generic => answers_from(obj.remove("answers"))?,
        DatasetFormat::Musique => {
            let mut a = answers_from(obj.remove("answer"))?;
            a.extend(answers_from(obj.remove("answer_aliases"))?);
            // Musique ids start with the hop pattern, e.g. "2hop__1234_5678".
            qtype = id.split("__").next().filter(|p| p.contains("hop")).map(str::to_owned);
            a
        }
        DatasetFormat::Crag => {
            let mut a = answers_from(obj.remove("answer"))?;
            a.extend(answers_from(obj.remove("alt_ans"))?);
            a
        }
        DatasetFormat::HotpotQa | DatasetFormat::TwoWiki | DatasetFormat::BlendQa => {
            let mut a = answers_from(obj.remove("answer").or_else(|| obj.remove("answers")))?;
            a.extend(answers_from(obj.remove("answer_aliases"))?);
            a
        }
    };
    gold_answers.retain(|a| !a.trim().is_empty());
    let mut dedup = std::collections::HashSet::new();
    gold_answers.retain(|a| dedup.insert(a.clone()));
    if gold_answers.is_empty() {
        return Err(format!("example {id:?} has no gold answers"));
    }
    let meta = match obj.remove("meta") {
        Some(Value::Object(m)) if format == DatasetFormat::Generic => m,
        Some(other) if format == DatasetFormat::Generic => {
            return Err(format!("meta must be an object, got {other}"));
        }
        _ => {
            // Keep small scalar fields from native formats; drop bulky
            // context blocks.
            obj.into_iter()
                .filter(|(_, v)| matches!(v, Value::String(_) | Value::Number(_) | Value::Bool(_)))
                .filter(|(_, v)| v.as_str().is_none_or(|s| s.len() <= 200))
                .collect()
        }
    };
    Ok(Example {
        id,
        question,
        gold_answers,
        qtype,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
    pub prediction: String,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub f1: f64,
    pub count: usize,
}

/// Means of run counters over the examples that carried a trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanCounters {
    pub traced: usize,
    pub llm_calls: f64,
    pub planning_calls: f64,
    pub selection_calls: f64,
    pub reasoning_calls: f64,
    pub kg_program_calls: f64,
    pub retriever_calls: f64,
    pub operator_fallbacks: f64,
    pub parent_fallbacks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub overall: f64,
    pub count: usize,
    pub per_type: BTreeMap<String, TypeScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counters: Option<MeanCounters>,
    /// Ids whose run failed and were scored with an empty prediction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<String>,
    pub examples: Vec<ExampleScore>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("no prediction for example {0:?}")]
pub struct MissingPrediction(pub String);

/// Scores every example in dataset order. Examples without a type are
/// left out of `per_type` but count toward `overall`.
pub fn evaluate(
    examples: &[Example],
    predictions: &HashMap<String, String>,
    traces: Option<&HashMap<String, Counters>>,
) -> Result<Report, MissingPrediction> {
    let mut scores = Vec::with_capacity(examples.len());
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ex in examples {
        let pred = predictions
            .get(&ex.id)
            .ok_or_else(|| MissingPrediction(ex.id.clone()))?;
        let f1 = token_f1(pred, &ex.gold_answers);
        if let Some(t) = &ex.qtype {
            groups.entry(t.clone()).or_default().push(f1);
        }
        scores.push(ExampleScore {
            id: ex.id.clone(),
            qtype: ex.qtype.clone(),
            prediction: pred.clone(),
            f1,
        });
    }
    let per_type = groups
        .into_iter()
        .map(|(t, v)| {
            let score = TypeScore {
                f1: mean(&v),
                count: v.len(),
            };
            (t, score)
        })
        .collect();
    let counters = traces.map(|traces| {
        let traced: Vec<&Counters> = examples.iter().filter_map(|e| traces.get(&e.id)).collect();
        let avg = |f: &dyn Fn(&Counters) -> usize| {
            mean(&traced.iter().map(|c| f(c) as f64).collect::<Vec<_>>())
        };
        MeanCounters {
            traced: traced.len(),
            llm_calls: avg(&|c| c.llm_calls),
            planning_calls: avg(&|c| c.planning_calls),
            selection_calls: avg(&|c| c.selection_calls),
            reasoning_calls: avg(&|c| c.reasoning_calls),
            kg_program_calls: avg(&|c| c.kg_program_calls),
            retriever_calls: avg(&|c| c.total_retriever_calls()),
            operator_fallbacks: avg(&|c| c.operator_fallbacks),
            parent_fallbacks: avg(&|c| c.parent_fallbacks),
        }
    });
    Ok(Report {
        overall: mean(&scores.iter().map(|s| s.f1).collect::<Vec<_>>()),
        count: scores.len(),
        per_type,
        counters,
        failed: Vec::new(),
        examples: scores,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Report {
    /// Plain-text table: overall, then one row per question type.
    pub fn summary(&self) -> String {
        let mut out = format!("overall  F1 {:6.2}  n={}\n", 100.0 * self.overall, self.count);
        for (t, s) in &self.per_type {
            out.push_str(&format!("{t:<8} F1 {:6.2}  n={}\n", 100.0 * s.f1, s.count));
        }
        if let Some(c) = &self.counters {
            out.push_str(&format!(
                "mean llm calls {:.2}, retriever calls {:.2}, fallbacks {:.2}/{:.2} over {} traces\n",
                c.llm_calls, c.retriever_calls, c.operator_fallbacks, c.parent_fallbacks, c.traced
            ));
        }
        if !self.failed.is_empty() {
            out.push_str(&format!("failed: {}\n", self.failed.join(", ")));
        }
        out
    }
}
