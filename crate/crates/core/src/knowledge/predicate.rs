//! Filter conditions: `<attribute key> (= | < | > | within) <value>`.
//!
//! The value is interpreted according to the type of the attribute it is
//! compared with. Periods for years and dates may be a single year
//! (`1955`), a month (`1955-02`), a day (`1955-02-24`) or an inclusive
//! range `A..B`. `concept = X` tests the entity's concepts.

use std::fmt;

use chrono::NaiveDate;
use thiserror::Error;

use super::kg::{AttrValue, Entity};
use crate::text::fold_name;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Eq,
    Lt,
    Gt,
    Within,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparison::Eq => "=",
            Comparison::Lt => "<",
            Comparison::Gt => ">",
            Comparison::Within => "within",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse condition {text:?}: {reason}")]
pub struct PredicateParseError {
    pub text: String,
    pub reason: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub key: String,
    pub op: Comparison,
    pub value: String,
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.key, self.op, self.value)
    }
}

impl Predicate {
    pub fn parse(text: &str) -> Result<Self, PredicateParseError> {
        let err = |reason| PredicateParseError {
            text: text.to_owned(),
            reason,
        };
        let lower = text.to_lowercase();
        let mut best: Option<(usize, usize, Comparison)> = None;
        let mut consider = |pos: Option<usize>, len: usize, op: Comparison| {
            if let Some(p) = pos {
                if best.is_none_or(|(b, _, _)| p < b) {
                    best = Some((p, len, op));
                }
            }
        };
        consider(lower.find(" within "), " within ".len(), Comparison::Within);
        consider(lower.find('='), 1, Comparison::Eq);
        consider(lower.find('<'), 1, Comparison::Lt);
        consider(lower.find('>'), 1, Comparison::Gt);
        let (pos, len, op) = best.ok_or_else(|| err("no comparison operator"))?;
        // `lower` may differ in byte length from `text` for some scripts;
        // slice the lowercase copy consistently.
        let key = fold_name(&lower[..pos]);
        let value = lower[pos + len..].trim().to_owned();
        if key.is_empty() {
            return Err(err("empty attribute key"));
        }
        if value.is_empty() {
            return Err(err("empty value"));
        }
        Ok(Predicate { key, op, value })
    }

    pub fn holds(&self, entity: &Entity) -> bool {
        if self.key == "concept" || self.key == "instance of" {
            let want = fold_name(&self.value);
            return entity.concepts.iter().any(|c| match self.op {
                Comparison::Eq => fold_name(c) == want,
                Comparison::Within => fold_name(c).contains(&want),
                _ => false,
            });
        }
        entity
            .attributes
            .iter()
            .filter(|a| fold_name(&a.key) == self.key)
            .any(|a| self.compare(&a.value))
    }

    fn compare(&self, attr: &AttrValue) -> bool {
        match attr {
            AttrValue::String { value } => {
                let (v, want) = (fold_name(value), fold_name(&self.value));
                match self.op {
                    Comparison::Eq => v == want,
                    Comparison::Within => v.contains(&want),
                    Comparison::Lt => v < want,
                    Comparison::Gt => v > want,
                }
            }
            AttrValue::Number { value, unit } => {
                let Some((lo, hi, want_unit)) = number_range(&self.value) else {
                    return false;
                };
                if let (Some(u), Some(w)) = (unit, &want_unit) {
                    if fold_name(u) != *w {
                        return false;
                    }
                }
                match self.op {
                    Comparison::Eq | Comparison::Within => *value >= lo && *value <= hi,
                    Comparison::Lt => *value < lo,
                    Comparison::Gt => *value > hi,
                }
            }
            AttrValue::Year { value } => {
                let Some((lo, hi)) = period(&self.value) else {
                    return false;
                };
                let (start, end) = (
                    NaiveDate::from_ymd_opt(*value, 1, 1),
                    NaiveDate::from_ymd_opt(*value, 12, 31),
                );
                let (Some(start), Some(end)) = (start, end) else {
                    return false;
                };
                match self.op {
                    Comparison::Eq | Comparison::Within => start >= lo && end <= hi,
                    Comparison::Lt => end < lo,
                    Comparison::Gt => start > hi,
                }
            }
            AttrValue::Date { value } => {
                let Some((lo, hi)) = period(&self.value) else {
                    return false;
                };
                match self.op {
                    Comparison::Eq | Comparison::Within => *value >= lo && *value <= hi,
                    Comparison::Lt => *value < lo,
                    Comparison::Gt => *value > hi,
                }
            }
        }
    }
}

/// `"180 cm"` → (180, 180, Some("cm")); `"170..190 cm"` → a range.
fn number_range(s: &str) -> Option<(f64, f64, Option<String>)> {
    let mut parts = s.split_whitespace();
    let number = parts.next()?;
    let unit: Vec<&str> = parts.collect();
    let unit = (!unit.is_empty()).then(|| fold_name(&unit.join(" ")));
    let (lo, hi) = match number.split_once("..") {
        Some((a, b)) => (a.parse().ok()?, b.parse().ok()?),
        None => {
            let v: f64 = number.parse().ok()?;
            (v, v)
        }
    };
    Some((lo, hi, unit))
}

/// Inclusive date bounds for a year, month, day or `A..B` range.
fn period(s: &str) -> Option<(NaiveDate, NaiveDate)> {
    if let Some((a, b)) = s.split_once("..") {
        let (lo, _) = period(a.trim())?;
        let (_, hi) = period(b.trim())?;
        return (lo <= hi).then_some((lo, hi));
    }
    let parts: Vec<&str> = s.trim().split('-').collect();
    let num = |i: usize| parts.get(i).and_then(|p| p.parse::<u32>().ok());
    match parts.len() {
        1 => {
            let y: i32 = parts[0].parse().ok()?;
            Some((
                NaiveDate::from_ymd_opt(y, 1, 1)?,
                NaiveDate::from_ymd_opt(y, 12, 31)?,
            ))
        }
        2 => {
            let y: i32 = parts[0].parse().ok()?;
            let m = num(1)?;
            let start = NaiveDate::from_ymd_opt(y, m, 1)?;
            let next = if m == 12 {
                NaiveDate::from_ymd_opt(y + 1, 1, 1)?
            } else {
                NaiveDate::from_ymd_opt(y, m + 1, 1)?
            };
            Some((start, next.pred_opt()?))
        }
        3 => {
            let d = NaiveDate::from_ymd_opt(parts[0].parse().ok()?, num(1)?, num(2)?)?;
            Some((d, d))
        }
        _ => None,
    }
}
