use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::schema::{end_marker, SlotSchema, END_BELIEF};
use super::CorpusError;

/// Informable slot values plus the set of requested slots.
///
/// Slots with no value are simply absent from `informable`, so two beliefs
/// that mean the same thing compare equal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "RawBelief")]
pub struct BeliefState {
    informable: BTreeMap<String, Vec<String>>,
    requestable: BTreeSet<String>,
}

#[derive(Deserialize)]
struct RawBelief {
    #[serde(default)]
    informable: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    requestable: BTreeSet<String>,
}

impl From<RawBelief> for BeliefState {
    fn from(raw: RawBelief) -> Self {
        let mut b = BeliefState { informable: BTreeMap::new(), requestable: raw.requestable };
        for (slot, value) in raw.informable {
            b.set_value(slot, value);
        }
        b
    }
}

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn informable(&self) -> &BTreeMap<String, Vec<String>> {
        &self.informable
    }

    pub fn requestable(&self) -> &BTreeSet<String> {
        &self.requestable
    }

    pub fn value(&self, slot: &str) -> &[String] {
        self.informable.get(slot).map_or(&[], Vec::as_slice)
    }

    /// Sets a slot's value; an empty value clears the slot.
    pub fn set_value(&mut self, slot: impl Into<String>, value: Vec<String>) {
        let slot = slot.into();
        if value.is_empty() {
            self.informable.remove(&slot);
        } else {
            self.informable.insert(slot, value);
        }
    }

    pub fn request(&mut self, slot: impl Into<String>) {
        self.requestable.insert(slot.into());
    }

    pub fn clear_requests(&mut self) {
        self.requestable.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.informable.is_empty() && self.requestable.is_empty()
    }

    /// Informable values as space-joined strings.
    pub fn constraints(&self) -> BTreeMap<String, String> {
        self.informable.iter().map(|(k, v)| (k.clone(), v.join(" "))).collect()
    }

    /// Checks every slot against the schema and that no value token is a belief marker.
    pub fn validate(&self, schema: &SlotSchema) -> Result<(), CorpusError> {
        for (slot, value) in &self.informable {
            if !schema.is_informable(slot) {
                return Err(CorpusError::Belief(format!("`{slot}` is not an informable slot")));
            }
            if let Some(t) = value.iter().find(|t| t.is_empty() || *t == END_BELIEF || schema.end_marker_index(t).is_some()) {
                return Err(CorpusError::Belief(format!("value of `{slot}` contains reserved token `{t}`")));
            }
        }
        if let Some(r) = self.requestable.iter().find(|r| !schema.is_requestable(r)) {
            return Err(CorpusError::Belief(format!("`{r}` is not a requestable slot")));
        }
        Ok(())
    }

    pub fn is_valid(&self, schema: &SlotSchema) -> bool {
        self.validate(schema).is_ok()
    }
}

/// Flattens a belief: each informable slot's value tokens followed by its end
/// marker (schema order), then the requested slot names (schema order), then
/// `end_belief`.
pub fn serialize_belief(belief: &BeliefState, schema: &SlotSchema) -> Vec<String> {
    let mut out = Vec::new();
    for slot in &schema.informable_slots {
        out.extend(belief.value(slot).iter().cloned());
        out.push(end_marker(slot));
    }
    out.extend(schema.requestable_slots.iter().filter(|r| belief.requestable.contains(*r)).cloned());
    out.push(END_BELIEF.to_string());
    out
}

/// Result of [`parse_belief`]; `valid` is false whenever the input was not
/// exactly the serialization of some belief.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedBelief {
    pub belief: BeliefState,
    pub valid: bool,
}

/// Inverse of [`serialize_belief`]. Total: malformed input yields a best-effort
/// belief with `valid == false`.
pub fn parse_belief<S: AsRef<str>>(tokens: &[S], schema: &SlotSchema) -> ParsedBelief {
    let mut belief = BeliefState::new();
    let mut valid = !tokens.is_empty();
    let mut buffer: Vec<String> = Vec::new();
    let mut next_slot = 0;
    let mut seen_end = false;
    for (i, token) in tokens.iter().enumerate() {
        let token = token.as_ref();
        if token == END_BELIEF {
            seen_end = true;
            valid &= i + 1 == tokens.len();
            break;
        }
        if let Some(k) = schema.end_marker_index(token) {
            valid &= k == next_slot;
            if belief.value(&schema.informable_slots[k]).is_empty() {
                belief.set_value(schema.informable_slots[k].clone(), std::mem::take(&mut buffer));
            } else {
                valid = false;
                buffer.clear();
            }
            next_slot = next_slot.max(k + 1);
            continue;
        }
        buffer.push(token.to_string());
    }
    valid &= seen_end && next_slot == schema.informable_slots.len();
    // whatever follows the last informable marker is the request list
    for token in buffer {
        if schema.is_requestable(&token) {
            belief.request(token);
        } else {
            valid = false;
        }
    }
    ParsedBelief { belief, valid }
}
