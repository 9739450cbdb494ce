use std::collections::{BTreeMap, HashMap};

use super::schema::{placeholder, SlotSchema, PLACEHOLDER_SUFFIX};
use crate::kb::{is_dontcare, Record};

/// Lowercasing word tokenizer.
///
/// Words are maximal runs of alphanumerics and `_`; every other non-space
/// character is its own token, except that an apostrophe followed by letters
/// starts a clitic token (`'s`, `'t`). Placeholder tokens keep their case.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            let w = std::mem::take(word);
            out.push(if w.ends_with(PLACEHOLDER_SUFFIX) && w.len() > PLACEHOLDER_SUFFIX.len() { w } else { w.to_lowercase() });
        }
    };
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else if c == '\'' && chars.peek().is_some_and(|n| n.is_alphabetic()) {
            flush(&mut word, &mut out);
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_lowercase().collect());
            }
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Replaces known attribute values with their placeholder tokens.
#[derive(Debug, Clone, Default)]
pub struct Delexicalizer {
    /// First token → candidate values, longest first.
    by_first: HashMap<String, Vec<(Vec<String>, String)>>,
}

impl Delexicalizer {
    /// Collects the values of every requestable attribute in `records`. When
    /// one value belongs to several attributes the first one seen (record
    /// order, then schema order) wins.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a Record>, schema: &SlotSchema) -> Self {
        let mut values: BTreeMap<Vec<String>, String> = BTreeMap::new();
        for record in records {
            for slot in &schema.requestable_slots {
                let Some(raw) = record.get(slot) else { continue };
                let tokens = tokenize(raw);
                if tokens.is_empty() || is_dontcare(&tokens.join(" ")) {
                    continue;
                }
                values.entry(tokens).or_insert_with(|| placeholder(slot));
            }
        }
        let mut by_first: HashMap<String, Vec<(Vec<String>, String)>> = HashMap::new();
        for (tokens, ph) in values {
            by_first.entry(tokens[0].clone()).or_default().push((tokens, ph));
        }
        for list in by_first.values_mut() {
            list.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Self { by_first }
    }

    /// Leftmost-longest replacement over the token sequence.
    pub fn apply_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        while i < tokens.len() {
            let hit = self.by_first.get(tokens[i].as_ref()).and_then(|cands| {
                cands.iter().find(|(value, _)| {
                    value.len() <= tokens.len() - i && value.iter().zip(&tokens[i..]).all(|(v, t)| v == t.as_ref())
                })
            });
            match hit {
                Some((value, ph)) => {
                    out.push(ph.clone());
                    i += value.len();
                }
                None => {
                    out.push(tokens[i].as_ref().to_string());
                    i += 1;
                }
            }
        }
        out
    }

    pub fn apply(&self, text: &str) -> Vec<String> {
        self.apply_tokens(&tokenize(text))
    }
}

/// Delexicalizes one response against a single record.
pub fn delexicalize(response: &str, record: &Record, schema: &SlotSchema) -> Vec<String> {
    Delexicalizer::from_records([record], schema).apply(response)
}
