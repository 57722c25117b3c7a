//! Embedded knowledge graph with symbolic Search / Relate / Filter.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::predicate::Predicate;
use crate::operators::{AnswerMethod, AnswerValue, LocalAnswer};
use crate::text::{fold_name, token_set};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AttrValue {
    String {
        value: String,
    },
    Number {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
    Year {
        value: i32,
    },
    Date {
        value: NaiveDate,
    },
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::String { value } => f.write_str(value),
            AttrValue::Number { value, unit } => {
                if value.fract() == 0.0 && value.abs() < 1e15 {
                    write!(f, "{}", *value as i64)?;
                } else {
                    write!(f, "{value}")?;
                }
                if let Some(u) = unit {
                    write!(f, " {u}")?;
                }
                Ok(())
            }
            AttrValue::Year { value } => write!(f, "{value}"),
            AttrValue::Date { value } => write!(
                f,
                "{} {}{}, {}",
                MONTHS[value.month0() as usize],
                value.day(),
                ordinal_suffix(value.day()),
                value.year()
            ),
        }
    }
}

const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

fn ordinal_suffix(day: u32) -> &'static str {
    match (day % 10, day % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub key: String,
    #[serde(flatten)]
    pub value: AttrValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub concepts: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<Attribute>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    #[serde(rename = "h")]
    pub head: String,
    #[serde(rename = "r")]
    pub relation: String,
    #[serde(rename = "t")]
    pub tail: String,
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("record {record}: {message}")]
    Format { record: usize, message: String },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct KgStats {
    pub entities: usize,
    pub triples: usize,
    pub attributes: usize,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    head: usize,
    relation: usize,
    tail: usize,
}

/// Immutable after construction. Entity ids, relation labels and names are
/// interned into indices at build time.
#[derive(Debug, Default)]
pub struct KgStore {
    entities: Vec<Entity>,
    by_id: HashMap<String, usize>,
    by_name: HashMap<String, Vec<usize>>,
    relations: Vec<String>,
    relation_by_name: HashMap<String, usize>,
    edges: Vec<Edge>,
    outgoing: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
}

impl KgStore {
    pub fn build(entities: Vec<Entity>, triples: Vec<Triple>) -> Result<Self, KgError> {
        let mut store = KgStore::default();
        for (n, e) in entities.into_iter().enumerate() {
            store.add_entity(e).map_err(|message| KgError::Format {
                record: n + 1,
                message,
            })?;
        }
        for (n, t) in triples.into_iter().enumerate() {
            store.add_triple(t).map_err(|message| KgError::Format {
                record: n + 1,
                message,
            })?;
        }
        Ok(store)
    }

    fn add_entity(&mut self, e: Entity) -> Result<(), String> {
        if e.id.is_empty() {
            return Err("entity id is empty".into());
        }
        if self.by_id.contains_key(&e.id) {
            return Err(format!("duplicate entity id `{}`", e.id));
        }
        if let Some(a) = e.attributes.iter().find(|a| a.key.trim().is_empty()) {
            return Err(format!("entity `{}` has an attribute with an empty key ({a:?})", e.id));
        }
        let idx = self.entities.len();
        self.by_id.insert(e.id.clone(), idx);
        let mut names: Vec<String> = std::iter::once(&e.label)
            .chain(&e.aliases)
            .map(|n| fold_name(n))
            .filter(|n| !n.is_empty())
            .collect();
        names.sort();
        names.dedup();
        for name in names {
            self.by_name.entry(name).or_default().push(idx);
        }
        self.entities.push(e);
        self.outgoing.push(Vec::new());
        self.incoming.push(Vec::new());
        Ok(())
    }

    fn add_triple(&mut self, t: Triple) -> Result<(), String> {
        let head = *self
            .by_id
            .get(&t.head)
            .ok_or_else(|| format!("triple head `{}` is not an entity", t.head))?;
        let tail = *self
            .by_id
            .get(&t.tail)
            .ok_or_else(|| format!("triple tail `{}` is not an entity", t.tail))?;
        let folded = fold_name(&t.relation);
        if folded.is_empty() {
            return Err("triple relation is empty".into());
        }
        let relation = match self.relation_by_name.get(&folded) {
            Some(&r) => r,
            None => {
                self.relations.push(t.relation.clone());
                self.relation_by_name.insert(folded, self.relations.len() - 1);
                self.relations.len() - 1
            }
        };
        let e = self.edges.len();
        self.edges.push(Edge {
            head,
            relation,
            tail,
        });
        self.outgoing[head].push(e);
        self.incoming[tail].push(e);
        Ok(())
    }

    /// Reads a JSON Lines dump. Entity records carry `id`; triple records
    /// carry `h`, `r`, `t`. Triples may precede the entities they mention.
    pub fn load_jsonl(path: &Path) -> Result<Self, KgError> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, KgError> {
        let mut entities = Vec::new();
        let mut triples = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let record = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| KgError::Format {
                    record,
                    message: e.to_string(),
                })?;
            let parsed = if value.get("h").is_some() {
                serde_json::from_value(value).map(|t| triples.push((record, t)))
            } else {
                serde_json::from_value(value).map(|e| entities.push((record, e)))
            };
            parsed.map_err(|e| KgError::Format {
                record,
                message: e.to_string(),
            })?;
        }
        let mut store = KgStore::default();
        for (record, e) in entities {
            store
                .add_entity(e)
                .map_err(|message| KgError::Format { record, message })?;
        }
        for (record, t) in triples {
            store
                .add_triple(t)
                .map_err(|message| KgError::Format { record, message })?;
        }
        Ok(store)
    }

    pub fn stats(&self) -> KgStats {
        KgStats {
            entities: self.entities.len(),
            triples: self.edges.len(),
            attributes: self.entities.iter().map(|e| e.attributes.len()).sum(),
        }
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.by_id.get(id).map(|&i| &self.entities[i])
    }

    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.edges.iter().map(|e| Triple {
            head: self.entities[e.head].id.clone(),
            relation: self.relations[e.relation].clone(),
            tail: self.entities[e.tail].id.clone(),
        })
    }

    pub fn label(&self, id: &str) -> Option<&str> {
        self.entity(id).map(|e| e.label.as_str())
    }

    fn names(&self, name: &str) -> &[usize] {
        self.by_name.get(&fold_name(name)).map_or(&[], Vec::as_slice)
    }

    /// Entities whose label or alias equals `name` after folding. With a
    /// descriptor, only the candidates sharing the most descriptor tokens
    /// with their concepts and attribute values survive; if none shares
    /// any, every name match is returned.
    pub fn search(&self, name: &str, descriptor: Option<&str>) -> Vec<String> {
        let candidates = self.names(name);
        let desc = descriptor.map(token_set).filter(|d| !d.is_empty());
        let chosen: Vec<usize> = match desc {
            None => candidates.to_vec(),
            Some(desc) => {
                let scores: Vec<usize> = candidates
                    .iter()
                    .map(|&i| {
                        let profile = self.profile_tokens(i);
                        desc.iter().filter(|t| profile.contains(*t)).count()
                    })
                    .collect();
                let best = scores.iter().copied().max().unwrap_or(0);
                if best == 0 {
                    candidates.to_vec()
                } else {
                    candidates
                        .iter()
                        .zip(&scores)
                        .filter(|(_, &s)| s == best)
                        .map(|(&i, _)| i)
                        .collect()
                }
            }
        };
        chosen.into_iter().map(|i| self.entities[i].id.clone()).collect()
    }

    fn profile_tokens(&self, idx: usize) -> BTreeSet<String> {
        let e = &self.entities[idx];
        let mut out = BTreeSet::new();
        for c in &e.concepts {
            out.extend(token_set(c));
        }
        for a in &e.attributes {
            out.extend(token_set(&a.value.to_string()));
        }
        out
    }

    /// One-hop inference from `entity_id`. The second argument is tried as
    /// an outgoing relation label, then as an attribute key, then as the
    /// name of a neighbouring entity; the first that matches answers.
    pub fn relate(&self, entity_id: &str, second: &str) -> Result<LocalAnswer, KgError> {
        let &idx = self
            .by_id
            .get(entity_id)
            .ok_or_else(|| KgError::UnknownEntity(entity_id.to_owned()))?;
        let folded = fold_name(second);
        let symbolic = |value| LocalAnswer {
            value,
            evidence: vec![format!("kg:{entity_id}")],
            method: AnswerMethod::KgSymbolic,
        };

        if let Some(&rel) = self.relation_by_name.get(&folded) {
            let mut tails = Vec::new();
            for &e in &self.outgoing[idx] {
                let edge = self.edges[e];
                if edge.relation == rel {
                    let label = self.entities[edge.tail].label.clone();
                    if !tails.contains(&label) {
                        tails.push(label);
                    }
                }
            }
            if !tails.is_empty() {
                return Ok(symbolic(AnswerValue::Entities(tails)));
            }
        }

        let values: Vec<String> = self.entities[idx]
            .attributes
            .iter()
            .filter(|a| fold_name(&a.key) == folded)
            .map(|a| a.value.to_string())
            .collect();
        if !values.is_empty() {
            return Ok(symbolic(AnswerValue::Attribute(values.join("; "))));
        }

        let others = self.names(second);
        if !others.is_empty() {
            let mut labels = Vec::new();
            let mut push = |l: String| {
                if !labels.contains(&l) {
                    labels.push(l);
                }
            };
            for &e in &self.outgoing[idx] {
                let edge = self.edges[e];
                if others.contains(&edge.tail) {
                    push(format!("{} (outgoing)", self.relations[edge.relation]));
                }
            }
            for &e in &self.incoming[idx] {
                let edge = self.edges[e];
                if others.contains(&edge.head) {
                    push(format!("{} (incoming)", self.relations[edge.relation]));
                }
            }
            if !labels.is_empty() {
                return Ok(symbolic(AnswerValue::Relation(labels.join("; "))));
            }
        }

        Ok(symbolic(AnswerValue::Entities(Vec::new())))
    }

    /// Keeps the ids whose entity satisfies `predicate`, preserving order.
    /// Ids that are not in the store are dropped.
    pub fn filter(&self, ids: &[String], predicate: &Predicate) -> Vec<String> {
        ids.iter()
            .filter(|id| {
                self.by_id
                    .get(id.as_str())
                    .is_some_and(|&i| predicate.holds(&self.entities[i]))
            })
            .cloned()
            .collect()
    }
}
