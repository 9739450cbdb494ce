//! Relational knowledge base: tables of flat string records, constraint
//! queries, the match-count indicator and response lexicalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_placeholder, tokenize, BeliefState, PLACEHOLDER_SUFFIX};

pub type Record = BTreeMap<String, String>;

/// Stored for attributes a record does not define; never equal to a constraint.
pub const EMPTY_VALUE: &str = "";
/// Written in place of a placeholder that no record or belief value can fill.
pub const FALLBACK_VALUE: &str = "unknown";
pub const DONTCARE: &str = "dontcare";
pub const MATCH_BINS: usize = 5;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("unknown KB attribute `{0}`")]
    UnknownAttribute(String),
    #[error("reading KB {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed KB {path} at line {line}, column {column}: {message}")]
    Json { path: PathBuf, line: usize, column: usize, message: String },
    #[error("KB table `{table}` record {record}: {message}")]
    Record { table: String, record: usize, message: String },
}

/// Lowercase and re-join the tokenizer's tokens with single spaces.
pub fn normalize(value: &str) -> String {
    tokenize(value).join(" ")
}

pub fn is_dontcare(value: &str) -> bool {
    let v = normalize(value);
    v == DONTCARE || v == "dont care" || v == "don 't care"
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TableRepr")]
pub struct KbTable {
    pub name: String,
    pub attributes: Vec<String>,
    pub records: Vec<Record>,
    #[serde(skip)]
    normalized: Vec<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
struct TableRepr {
    name: String,
    attributes: Vec<String>,
    records: Vec<Record>,
}

impl From<TableRepr> for KbTable {
    fn from(r: TableRepr) -> Self {
        KbTable::with_attributes(r.name, r.attributes, r.records)
    }
}

impl KbTable {
    /// Attributes are the union over records, in first-seen order; records
    /// lacking one get [`EMPTY_VALUE`].
    pub fn new(name: impl Into<String>, records: Vec<Record>) -> Self {
        let mut attributes: Vec<String> = Vec::new();
        for r in &records {
            for k in r.keys() {
                if !attributes.contains(k) {
                    attributes.push(k.clone());
                }
            }
        }
        Self::with_attributes(name, attributes, records)
    }

    pub fn with_attributes(name: impl Into<String>, attributes: Vec<String>, mut records: Vec<Record>) -> Self {
        for r in &mut records {
            for a in &attributes {
                r.entry(a.clone()).or_insert_with(|| EMPTY_VALUE.to_string());
            }
        }
        let normalized = records.iter().map(|r| r.iter().map(|(k, v)| (k.clone(), normalize(v))).collect()).collect();
        Self { name: name.into(), attributes, records, normalized }
    }

    pub fn has_attribute(&self, attr: &str) -> bool {
        self.attributes.iter().any(|a| a == attr)
    }

    /// Records whose every constrained attribute equals the constraint after
    /// normalization. Empty and `dontcare` constraints are ignored.
    pub fn query<'t>(&'t self, constraints: &BTreeMap<String, String>) -> Result<Vec<&'t Record>, KbError> {
        let active = active_constraints(constraints);
        if let Some((attr, _)) = active.iter().find(|(a, _)| !self.has_attribute(a)) {
            return Err(KbError::UnknownAttribute(attr.to_string()));
        }
        Ok(self.matching(&active))
    }

    fn matching<'t>(&'t self, active: &[(&str, String)]) -> Vec<&'t Record> {
        self.records
            .iter()
            .zip(&self.normalized)
            .filter(|(_, norm)| active.iter().all(|(a, v)| norm.get(*a).is_some_and(|x| x == v)))
            .map(|(r, _)| r)
            .collect()
    }
}

fn active_constraints(constraints: &BTreeMap<String, String>) -> Vec<(&str, String)> {
    constraints
        .iter()
        .map(|(k, v)| (k.as_str(), normalize(v)))
        .filter(|(_, v)| !v.is_empty() && !is_dontcare(v))
        .collect()
}

/// One or more tables. A query runs against every table that has all the
/// constrained attributes; results are concatenated in table order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kb {
    pub tables: Vec<KbTable>,
}

impl Kb {
    pub fn new(tables: Vec<KbTable>) -> Self {
        Self { tables }
    }

    pub fn num_records(&self) -> usize {
        self.tables.iter().map(|t| t.records.len()).sum()
    }

    pub fn attributes(&self) -> BTreeSet<&str> {
        self.tables.iter().flat_map(|t| t.attributes.iter().map(String::as_str)).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.tables.iter().flat_map(|t| t.records.iter())
    }

    pub fn query(&self, constraints: &BTreeMap<String, String>) -> Result<Vec<&Record>, KbError> {
        let active = active_constraints(constraints);
        let known = self.attributes();
        if let Some((attr, _)) = active.iter().find(|(a, _)| !known.contains(a)) {
            return Err(KbError::UnknownAttribute(attr.to_string()));
        }
        Ok(self
            .tables
            .iter()
            .filter(|t| active.iter().all(|(a, _)| t.has_attribute(a)))
            .flat_map(|t| t.matching(&active))
            .collect())
    }

    /// Queries with a belief's informable values, dropping slots that are not
    /// attributes of any table.
    pub fn query_belief(&self, belief: &BeliefState) -> Vec<&Record> {
        let known = self.attributes();
        let constraints: BTreeMap<String, String> =
            belief.constraints().into_iter().filter(|(k, _)| known.contains(k.as_str())).collect();
        self.query(&constraints).expect("constraints restricted to known attributes")
    }

    /// Loads either a JSON array of records (one table named `kb`) or an
    /// object mapping table names to record arrays (tables ordered by name).
    pub fn load(path: &Path) -> Result<Self, KbError> {
        let text = fs::read_to_string(path).map_err(|source| KbError::Io { path: path.to_path_buf(), source })?;
        Self::from_json_str(&text).map_err(|e| match e {
            KbError::Json { line, column, message, .. } => KbError::Json { path: path.to_path_buf(), line, column, message },
            other => other,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, KbError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Layout {
            Single(Vec<serde_json::Map<String, serde_json::Value>>),
            Named(BTreeMap<String, Vec<serde_json::Map<String, serde_json::Value>>>),
        }
        let layout: Layout = serde_json::from_str(text).map_err(|e| KbError::Json {
            path: PathBuf::new(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let named = match layout {
            Layout::Single(records) => vec![("kb".to_string(), records)],
            Layout::Named(map) => map.into_iter().collect(),
        };
        let mut tables = Vec::with_capacity(named.len());
        for (name, raw) in named {
            let mut records = Vec::with_capacity(raw.len());
            for (i, obj) in raw.into_iter().enumerate() {
                let mut record = Record::new();
                for (k, v) in obj {
                    let serde_json::Value::String(s) = v else {
                        return Err(KbError::Record { table: name, record: i, message: format!("attribute `{k}` is not a string") });
                    };
                    record.insert(k, s);
                }
                records.push(record);
            }
            tables.push(KbTable::new(name, records));
        }
        Ok(Self { tables })
    }

    /// Writes the named-table layout accepted by [`Kb::load`].
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .tables
            .iter()
            .map(|t| (t.name.clone(), serde_json::to_value(&t.records).expect("records serialize")))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// One-hot over {0, 1, 2, 3, ≥4} matched records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatchIndicator {
    bin: usize,
}

impl MatchIndicator {
    pub fn bin(self) -> usize {
        self.bin
    }

    pub fn bins(self) -> [f64; MATCH_BINS] {
        let mut out = [0.0; MATCH_BINS];
        out[self.bin] = 1.0;
        out
    }
}

pub fn encode_match_count(n: usize) -> MatchIndicator {
    MatchIndicator { bin: n.min(MATCH_BINS - 1) }
}

/// Fills each placeholder from the first result record, falling back to the
/// belief's value for that slot and then to [`FALLBACK_VALUE`].
pub fn lexicalize<S: AsRef<str>>(delex: &[S], results: &[&Record], belief: &BeliefState) -> String {
    let first = results.first();
    let words: Vec<String> = delex
        .iter()
        .map(|tok| {
            let tok = tok.as_ref();
            if !is_placeholder(tok) {
                return tok.to_string();
            }
            let slot = &tok[..tok.len() - PLACEHOLDER_SUFFIX.len()];
            first
                .and_then(|r| r.get(slot))
                .map(|v| normalize(v))
                .filter(|v| !v.is_empty())
                .or_else(|| Some(belief.value(slot).join(" ")).filter(|v| !v.is_empty()))
                .unwrap_or_else(|| FALLBACK_VALUE.to_string())
        })
        .collect();
    words.join(" ")
}
