use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::schema::SlotSchema;
use super::CorpusError;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const GO: &str = "<go>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const GO_ID: usize = 2;
pub const EOS_ID: usize = 3;

/// Token ↔ id mapping. Reserved and schema tokens occupy the first
/// `num_reserved` ids; the rest are ordered by descending count, then token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    num_reserved: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    num_reserved: usize,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = CorpusError;

    fn try_from(r: VocabRepr) -> Result<Self, Self::Error> {
        Vocab::from_tokens(r.tokens, r.num_reserved)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens, num_reserved: v.num_reserved }
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>, num_reserved: usize) -> Result<Self, CorpusError> {
        if num_reserved > tokens.len() || tokens.get(..4) != Some(&[PAD.into(), UNK.into(), GO.into(), EOS.into()][..]) {
            return Err(CorpusError::Vocab("vocabulary must start with <pad> <unk> <go> <eos>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index, num_reserved })
    }

    /// Builds from token counts. Tokens seen at least `min_count` times are kept;
    /// reserved and schema tokens are always present.
    pub fn build<'a, I>(tokens: I, schema: &SlotSchema, min_count: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_count == 0 {
            return Err(CorpusError::Vocab("min_count must be at least 1".into()));
        }
        let mut reserved: Vec<String> = [PAD, UNK, GO, EOS].map(String::from).to_vec();
        for t in schema.structural_tokens() {
            if !reserved.contains(&t) {
                reserved.push(t);
            }
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut rest: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(t, c)| c >= min_count && !reserved.iter().any(|r| r == t)).collect();
        rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let num_reserved = reserved.len();
        reserved.extend(rest.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(reserved, num_reserved)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_reserved(&self) -> usize {
        self.num_reserved
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}
