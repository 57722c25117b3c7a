//! Small text helpers shared by the operator gate, the KG name index and
//! the evaluation metric.

use std::collections::BTreeSet;

use unicode_normalization::UnicodeNormalization;

/// Folds a name for exact matching: NFKC, lowercase, single spaces.
pub fn fold_name(s: &str) -> String {
    let lowered: String = s.nfkc().flat_map(char::to_lowercase).collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercase, drop punctuation, split on whitespace, dedupe.
///
/// Anything that is neither alphanumeric nor whitespace counts as
/// punctuation and is deleted, so `"Shakira's"` becomes `shakiras`.
pub fn token_set(s: &str) -> BTreeSet<String> {
    strip_punctuation(&s.to_lowercase())
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

pub(crate) fn strip_punctuation(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect()
}

/// Returns the indices of every `[i]` placeholder in `text`, in order of
/// appearance. Brackets that do not hold a plain decimal index are ignored.
pub fn placeholders(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > start && j < bytes.len() && bytes[j] == b']' {
                if let Ok(n) = text[start..j].parse() {
                    out.push(n);
                }
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}
