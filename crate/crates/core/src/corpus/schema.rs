use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::CorpusError;

pub const PLACEHOLDER_SUFFIX: &str = "_SLOT";
pub const END_BELIEF: &str = "end_belief";

/// Slot inventory of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSchema {
    pub informable_slots: Vec<String>,
    pub requestable_slots: Vec<String>,
    /// Placeholder token for each requestable slot, in the same order.
    pub response_slots: Vec<String>,
}

pub fn placeholder(slot: &str) -> String {
    format!("{slot}{PLACEHOLDER_SUFFIX}")
}

pub fn end_marker(slot: &str) -> String {
    format!("end_{slot}")
}

pub fn start_symbol(slot: &str) -> String {
    format!("<go_{slot}>")
}

pub fn is_placeholder(token: &str) -> bool {
    token.len() > PLACEHOLDER_SUFFIX.len() && token.ends_with(PLACEHOLDER_SUFFIX)
}

impl SlotSchema {
    /// Builds a schema whose response slots are the requestable slots' placeholders.
    pub fn new<I, R>(informable: I, requestable: R) -> Result<Self, CorpusError>
    where
        I: IntoIterator,
        I::Item: Into<String>,
        R: IntoIterator,
        R::Item: Into<String>,
    {
        let informable_slots: Vec<String> = informable.into_iter().map(Into::into).collect();
        let requestable_slots: Vec<String> = requestable.into_iter().map(Into::into).collect();
        let response_slots = requestable_slots.iter().map(|s| placeholder(s)).collect();
        let schema = Self { informable_slots, requestable_slots, response_slots };
        schema.validate()?;
        Ok(schema)
    }

    /// Cambridge restaurant schema (`pricerange` is renamed `price` on ingestion).
    pub fn camrest() -> Self {
        Self::new(
            ["price", "food", "area"],
            ["address", "area", "food", "name", "phone", "postcode", "price"],
        )
        .expect("static schema is valid")
    }

    /// One merged inventory over the navigation, weather and calendar domains.
    pub fn kvret() -> Self {
        Self::new(
            [
                "agenda",
                "date",
                "event",
                "location",
                "party",
                "poi",
                "poi_type",
                "room",
                "time",
                "weather_attribute",
            ],
            [
                "address",
                "agenda",
                "date",
                "distance",
                "event",
                "location",
                "party",
                "poi",
                "room",
                "time",
                "traffic_info",
                "weather_attribute",
            ],
        )
        .expect("static schema is valid")
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::Schema(msg));
        if self.response_slots.len() != self.requestable_slots.len() {
            return bad(format!(
                "{} response slots for {} requestable slots",
                self.response_slots.len(),
                self.requestable_slots.len()
            ));
        }
        for (name, list) in [
            ("informable", &self.informable_slots),
            ("requestable", &self.requestable_slots),
            ("response", &self.response_slots),
        ] {
            let mut seen = BTreeSet::new();
            for slot in list {
                if slot.is_empty() || slot.chars().any(|c| !(c.is_alphanumeric() || c == '_')) {
                    return bad(format!("{name} slot `{slot}` is not a single word token"));
                }
                if !seen.insert(slot) {
                    return bad(format!("duplicate {name} slot `{slot}`"));
                }
            }
        }
        for (req, resp) in self.requestable_slots.iter().zip(&self.response_slots) {
            if !is_placeholder(resp) {
                return bad(format!("response slot `{resp}` for `{req}` must end in {PLACEHOLDER_SUFFIX}"));
            }
        }
        let structural: BTreeSet<String> = self.informable_slots.iter().map(|s| end_marker(s)).collect();
        if let Some(r) = self.requestable_slots.iter().find(|r| structural.contains(*r) || *r == END_BELIEF) {
            return bad(format!("requestable slot `{r}` collides with a belief marker"));
        }
        Ok(())
    }

    pub fn is_informable(&self, slot: &str) -> bool {
        self.informable_slots.iter().any(|s| s == slot)
    }

    pub fn is_requestable(&self, slot: &str) -> bool {
        self.requestable_slots.iter().any(|s| s == slot)
    }

    pub fn is_response_slot(&self, token: &str) -> bool {
        self.response_slots.iter().any(|s| s == token)
    }

    pub fn informable_index(&self, slot: &str) -> Option<usize> {
        self.informable_slots.iter().position(|s| s == slot)
    }

    /// Index of the informable slot whose end marker is `token`.
    pub fn end_marker_index(&self, token: &str) -> Option<usize> {
        let slot = token.strip_prefix("end_")?;
        self.informable_index(slot)
    }

    /// Every token with a fixed structural role: start symbols, end markers,
    /// requestable names and placeholders.
    pub fn structural_tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = self.informable_slots.iter().map(|s| start_symbol(s)).collect();
        out.extend(self.informable_slots.iter().map(|s| end_marker(s)));
        out.push(END_BELIEF.to_string());
        out.extend(self.requestable_slots.iter().cloned());
        out.extend(self.response_slots.iter().cloned());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_schemas_have_expected_sizes() {
        let c = SlotSchema::camrest();
        assert_eq!((c.informable_slots.len(), c.requestable_slots.len(), c.response_slots.len()), (3, 7, 7));
        let k = SlotSchema::kvret();
        assert_eq!((k.informable_slots.len(), k.requestable_slots.len(), k.response_slots.len()), (10, 12, 12));
        assert_eq!(c.response_slots[0], "address_SLOT");
    }

    #[test]
    fn rejects_duplicates_and_misaligned_lists() {
        assert!(SlotSchema::new(["a", "a"], ["b"]).is_err());
        let mut s = SlotSchema::camrest();
        s.response_slots.pop();
        assert!(s.validate().is_err());
        assert!(SlotSchema::new(["food"], ["end_food"]).is_err());
    }

    #[test]
    fn end_marker_lookup() {
        let s = SlotSchema::camrest();
        assert_eq!(s.end_marker_index("end_area"), Some(2));
        assert_eq!(s.end_marker_index("end_belief"), None);
        assert_eq!(s.end_marker_index("area"), None);
    }
}
